/** Client-side parsing of the point cloud formats, for local rendering.
 * The server remains the source of truth; this only feeds the 3D view.
 */

const PCLD_MAGIC = 0x444c4350; // "PCLD" little-endian

export function parsePointCloud(buffer: ArrayBuffer): Float32Array {
  const view = new DataView(buffer);
  if (buffer.byteLength >= 12 && view.getUint32(0, true) === PCLD_MAGIC) {
    const n = view.getUint32(8, true);
    const need = 12 + n * 12;
    if (buffer.byteLength < need) {
      throw new Error(`truncated point cloud: need ${need} bytes, have ${buffer.byteLength}`);
    }
    return new Float32Array(buffer.slice(12, need));
  }
  const text = new TextDecoder().decode(buffer);
  const values: number[] = [];
  for (const line of text.split("\n")) {
    const trimmed = line.trim();
    if (!trimmed) continue;
    const parts = trimmed.split(/\s+/);
    if (parts.length !== 3) throw new Error(`expected 3 columns, got ${parts.length}`);
    for (const p of parts) {
      const v = Number(p);
      if (!Number.isFinite(v)) throw new Error(`non-numeric coordinate: ${p}`);
      values.push(v);
    }
  }
  if (!values.length) throw new Error("no points found");
  return new Float32Array(values);
}

/** Uniform stride decimation above a budget; scores and cluster membership
 * always come from the server, this only thins the rendered set. */
export function decimate(
  positions: Float32Array,
  maxPoints: number,
): { positions: Float32Array; kept: Int32Array } {
  const n = positions.length / 3;
  if (n <= maxPoints) {
    const kept = new Int32Array(n);
    for (let i = 0; i < n; i++) kept[i] = i;
    return { positions, kept };
  }
  const kept = new Int32Array(maxPoints);
  const out = new Float32Array(maxPoints * 3);
  for (let j = 0; j < maxPoints; j++) {
    const i = Math.floor((j * n) / maxPoints);
    kept[j] = i;
    out[3 * j] = positions[3 * i];
    out[3 * j + 1] = positions[3 * i + 1];
    out[3 * j + 2] = positions[3 * i + 2];
  }
  return { positions: out, kept };
}
