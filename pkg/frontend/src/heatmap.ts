/**
 * Heat-map rendering helpers, kept DOM-free so they are unit-testable:
 * activation values map through a blue-to-red ramp into an RGBA buffer
 * whose alpha scales with activation, ready for canvas compositing.
 */

/** Piecewise-linear blue -> cyan -> yellow -> red ramp for v in [0, 1]. */
export function valueToColor(v: number): [number, number, number] {
  const x = Math.min(1, Math.max(0, v));
  if (x < 1 / 3) {
    const t = x * 3;
    return [0, Math.round(255 * t), 255];
  }
  if (x < 2 / 3) {
    const t = (x - 1 / 3) * 3;
    return [Math.round(255 * t), 255, Math.round(255 * (1 - t))];
  }
  const t = (x - 2 / 3) * 3;
  return [255, Math.round(255 * (1 - t)), 0];
}

/**
 * Row-major values into an RGBA overlay buffer. Alpha is activation times
 * maxAlpha so inactive regions stay transparent over the gallery tile.
 */
export function renderOverlay(
  values: number[],
  width: number,
  height: number,
  maxAlpha = 0.75,
): Uint8ClampedArray<ArrayBuffer> {
  if (values.length !== width * height) {
    throw new RangeError(`expected ${width * height} values, got ${values.length}`);
  }
  const out = new Uint8ClampedArray(width * height * 4);
  for (let i = 0; i < values.length; i++) {
    const v = Math.min(1, Math.max(0, values[i]));
    const [r, g, b] = valueToColor(v);
    out[4 * i] = r;
    out[4 * i + 1] = g;
    out[4 * i + 2] = b;
    out[4 * i + 3] = Math.round(255 * maxAlpha * v);
  }
  return out;
}
