/** Fixed cluster palette; stable across re-renders so rerunning the same
 * clustering recolors identically. */

const PALETTE: [number, number, number][] = [
  [0.28, 0.47, 0.69], // blue
  [0.87, 0.52, 0.32], // orange
  [0.33, 0.66, 0.41], // green
  [0.77, 0.31, 0.32], // red
  [0.51, 0.45, 0.70], // purple
  [0.55, 0.57, 0.67], // slate
  [0.86, 0.55, 0.77], // pink
  [0.58, 0.47, 0.38], // brown
];

export const GREY: [number, number, number] = [0.62, 0.62, 0.62];
export const HIGHLIGHT: [number, number, number] = [1.0, 0.84, 0.0];

export function clusterColor(index: number): [number, number, number] {
  return PALETTE[index % PALETTE.length];
}

/** Per-point RGB buffer from a cluster assignment; -1 marks unassigned
 * (stripped) points, which stay grey. The highlighted cluster overrides
 * its palette color. */
export function colorBuffer(
  assignment: Int32Array,
  highlight: number | null,
): Float32Array {
  const colors = new Float32Array(assignment.length * 3);
  for (let i = 0; i < assignment.length; i++) {
    const cluster = assignment[i];
    let rgb: [number, number, number];
    if (cluster < 0) {
      rgb = GREY;
    } else if (highlight !== null && cluster === highlight) {
      rgb = HIGHLIGHT;
    } else {
      rgb = clusterColor(cluster);
    }
    colors[3 * i] = rgb[0];
    colors[3 * i + 1] = rgb[1];
    colors[3 * i + 2] = rgb[2];
  }
  return colors;
}

/** Assignment array from per-cluster index lists; total is the uploaded
 * point count, indices reference the original scene order. */
export function buildAssignment(
  total: number,
  clusterIndices: number[][],
): Int32Array {
  const assignment = new Int32Array(total).fill(-1);
  clusterIndices.forEach((indices, cluster) => {
    for (const i of indices) assignment[i] = cluster;
  });
  return assignment;
}
