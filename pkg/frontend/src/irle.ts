/**
 * IRLE v1 mask codec.
 *
 * Wire shape: a header line `IRLE1 <width> <height>` followed by one line of
 * comma-separated run lengths, row-major over the flat raster, alternating
 * starting with background (the leading background run may be zero), summing
 * to width * height, with a trailing newline.
 */

export class IrleError extends Error {}

export interface DecodedMask {
  readonly width: number;
  readonly height: number;
  /** Row-major, one byte per pixel, 1 = foreground. */
  readonly data: Uint8Array;
}

function parseIntStrict(token: string, what: string): number {
  if (!/^-?\d+$/.test(token)) {
    throw new IrleError(`${what} is not an integer: ${JSON.stringify(token)}`);
  }
  return parseInt(token, 10);
}

export function decodeIrle(payload: string): DecodedMask {
  const lines = payload.split("\n");
  if (lines.length < 2) {
    throw new IrleError("payload must carry a header line and a runs line");
  }
  const head = lines[0].split(" ");
  if (head.length !== 3 || head[0] !== "IRLE1") {
    throw new IrleError(`malformed header: ${JSON.stringify(lines[0])}`);
  }
  const width = parseIntStrict(head[1], "width");
  const height = parseIntStrict(head[2], "height");
  if (width < 1 || height < 1) {
    throw new IrleError(`dimensions must be positive, got ${width}x${height}`);
  }
  const runs = lines[1].split(",").map((t) => parseIntStrict(t, "run length"));
  if (runs.some((r) => r < 0)) {
    throw new IrleError("run lengths must be non-negative");
  }
  const total = runs.reduce((a, b) => a + b, 0);
  if (total !== width * height) {
    throw new IrleError(`runs sum to ${total}, expected ${width * height}`);
  }
  const data = new Uint8Array(width * height);
  let pos = 0;
  for (let i = 0; i < runs.length; i++) {
    const value = i & 1;
    if (value === 1) {
      data.fill(1, pos, pos + runs[i]);
    }
    pos += runs[i];
  }
  return { width, height, data };
}

export function encodeIrle(mask: DecodedMask): string {
  const { width, height, data } = mask;
  if (data.length !== width * height) {
    throw new IrleError(`data length ${data.length} does not match ${width}x${height}`);
  }
  const runs: number[] = [];
  if (data.length > 0 && data[0] === 1) {
    runs.push(0);
  }
  let runValue = data.length > 0 ? data[0] : 0;
  let runLen = 0;
  for (let i = 0; i < data.length; i++) {
    const v = data[i] === 0 ? 0 : 1;
    if (v === runValue) {
      runLen += 1;
    } else {
      runs.push(runLen);
      runValue = v;
      runLen = 1;
    }
  }
  runs.push(runLen);
  return `IRLE1 ${width} ${height}\n${runs.join(",")}\n`;
}

export function maskArea(mask: DecodedMask): number {
  let n = 0;
  for (let i = 0; i < mask.data.length; i++) {
    if (mask.data[i]) n += 1;
  }
  return n;
}
