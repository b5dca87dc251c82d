/**
 * Run-length mask decoding. The service sends masks as
 * `H,W|start,length;start,length;...` where runs index 1-pixels in the
 * row-major flattening. An empty run list (`H,W|`) is an empty mask.
 */

export interface DecodedMask {
  height: number;
  width: number;
  /** row-major 0/1 bytes, length height*width */
  data: Uint8Array;
}

export class RleParseError extends Error {
  readonly code = "PARSE_ERROR";
}

export function decodeRle(s: string): DecodedMask {
  const bar = s.indexOf("|");
  if (bar < 0) throw new RleParseError(`missing header separator in ${JSON.stringify(s)}`);
  const header = s.slice(0, bar).split(",");
  if (header.length !== 2) throw new RleParseError(`bad header ${JSON.stringify(s.slice(0, bar))}`);
  const height = parseDim(header[0]);
  const width = parseDim(header[1]);
  const data = new Uint8Array(height * width);
  const runs = s.slice(bar + 1);
  if (runs.length > 0) {
    for (const run of runs.split(";")) {
      const parts = run.split(",");
      if (parts.length !== 2) throw new RleParseError(`bad run ${JSON.stringify(run)}`);
      const start = parseDim(parts[0], true);
      const length = parseDim(parts[1]);
      if (start + length > data.length) throw new RleParseError(`run ${run} exceeds ${data.length} pixels`);
      data.fill(1, start, start + length);
    }
  }
  return { height, width, data };
}

function parseDim(raw: string, allowZero = false): number {
  if (!/^\d+$/.test(raw)) throw new RleParseError(`not a number: ${JSON.stringify(raw)}`);
  const v = Number(raw);
  if (!allowZero && v <= 0) throw new RleParseError(`must be positive: ${raw}`);
  return v;
}

export function maskArea(mask: DecodedMask): number {
  let n = 0;
  for (const v of mask.data) n += v;
  return n;
}
