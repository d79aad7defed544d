/** Three.js point cloud view: grey on load, palette colors per cluster,
 * gold highlight for the selected cluster. */

import * as THREE from "three";
import { OrbitControls } from "three/examples/jsm/controls/OrbitControls.js";
import { GREY, colorBuffer } from "./palette.js";
import { decimate } from "./pcparse.js";

const MAX_RENDER_POINTS = 500_000;

export class PointCloudView {
  private renderer: THREE.WebGLRenderer;
  private scene = new THREE.Scene();
  private camera: THREE.PerspectiveCamera;
  private controls: OrbitControls;
  private points: THREE.Points | null = null;
  private geometry: THREE.BufferGeometry | null = null;
  /** original scene index of each rendered point */
  private kept: Int32Array = new Int32Array(0);

  constructor(private canvas: HTMLCanvasElement) {
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
    this.renderer.setPixelRatio(window.devicePixelRatio);
    this.scene.background = new THREE.Color(0x101418);
    this.camera = new THREE.PerspectiveCamera(50, 1, 0.01, 1000);
    this.camera.position.set(6, 6, 6);
    this.controls = new OrbitControls(this.camera, canvas);
    this.controls.addEventListener("change", () => this.draw());
    this.resize();
    window.addEventListener("resize", () => this.resize());
  }

  resize(): void {
    const w = this.canvas.clientWidth || 800;
    const h = this.canvas.clientHeight || 600;
    this.renderer.setSize(w, h, false);
    this.camera.aspect = w / h;
    this.camera.updateProjectionMatrix();
    this.draw();
  }

  setPoints(positions: Float32Array): void {
    const { positions: shown, kept } = decimate(positions, MAX_RENDER_POINTS);
    this.kept = kept;
    if (this.points) {
      this.scene.remove(this.points);
      this.geometry?.dispose();
    }
    this.geometry = new THREE.BufferGeometry();
    this.geometry.setAttribute("position", new THREE.BufferAttribute(shown, 3));
    const grey = new Float32Array(shown.length);
    for (let i = 0; i < shown.length / 3; i++) {
      grey.set(GREY, 3 * i);
    }
    this.geometry.setAttribute("color", new THREE.BufferAttribute(grey, 3));
    const material = new THREE.PointsMaterial({ size: 0.06, vertexColors: true });
    this.points = new THREE.Points(this.geometry, material);
    this.scene.add(this.points);
    this.frame(shown);
    this.draw();
  }

  /** Color by full-scene assignment (indices in original order). */
  colorByAssignment(assignment: Int32Array, highlight: number | null): void {
    if (!this.geometry) return;
    const sub = new Int32Array(this.kept.length);
    for (let j = 0; j < this.kept.length; j++) {
      sub[j] = assignment[this.kept[j]];
    }
    const colors = colorBuffer(sub, highlight);
    this.geometry.setAttribute("color", new THREE.BufferAttribute(colors, 3));
    (this.geometry.getAttribute("color") as THREE.BufferAttribute).needsUpdate = true;
    this.draw();
  }

  private frame(positions: Float32Array): void {
    const box = new THREE.Box3();
    for (let i = 0; i < positions.length; i += 3) {
      box.expandByPoint(
        new THREE.Vector3(positions[i], positions[i + 1], positions[i + 2]),
      );
    }
    const center = box.getCenter(new THREE.Vector3());
    const size = box.getSize(new THREE.Vector3()).length() || 1;
    this.controls.target.copy(center);
    this.camera.position.copy(center.clone().add(new THREE.Vector3(size, size * 0.7, size)));
    this.camera.near = size / 1000;
    this.camera.far = size * 20;
    this.camera.updateProjectionMatrix();
    this.controls.update();
  }

  draw(): void {
    this.renderer.render(this.scene, this.camera);
  }
}
