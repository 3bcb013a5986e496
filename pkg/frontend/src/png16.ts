/** Minimal PNG decoder for exactly what the service serves:
 *
 * - 16-bit grayscale (color type 0, bit depth 16): probability maps,
 *   pixel = round(u * 65535), big-endian samples;
 * - 8-bit palette (color type 3): label maps whose indices are labels.
 *
 * Non-interlaced streams only, all five scanline filters, multiple IDAT
 * chunks, CRC-checked. Inflation goes through DecompressionStream, which
 * both browsers and node provide.
 */

export class PngFormatError extends Error {}

export interface Prob16Image {
  width: number;
  height: number;
  /** row-major quantized probabilities, u = values[i] / 65535 */
  values: Uint16Array;
}

export interface LabelImage {
  width: number;
  height: number;
  /** row-major palette indices = labels */
  labels: Uint8Array;
  /** rgb triplets, 3 bytes per palette entry */
  palette: Uint8Array;
}

const SIGNATURE = [0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a];

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c;
  }
  return table;
})();

function crc32(bytes: Uint8Array, start: number, end: number): number {
  let c = 0xffffffff;
  for (let i = start; i < end; i++) {
    c = CRC_TABLE[(c ^ bytes[i]) & 0xff] ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

function readU32(bytes: Uint8Array, at: number): number {
  return ((bytes[at] << 24) | (bytes[at + 1] << 16) | (bytes[at + 2] << 8) | bytes[at + 3]) >>> 0;
}

interface Chunks {
  width: number;
  height: number;
  bitDepth: number;
  colorType: number;
  palette: Uint8Array | null;
  idat: Uint8Array;
}

function splitChunks(bytes: Uint8Array): Chunks {
  if (bytes.length < 8 || SIGNATURE.some((b, i) => bytes[i] !== b)) {
    throw new PngFormatError("not a PNG: bad signature");
  }
  let at = 8;
  let header: Omit<Chunks, "palette" | "idat"> | null = null;
  let palette: Uint8Array | null = null;
  const idatParts: Uint8Array[] = [];
  let sawEnd = false;
  while (at + 12 <= bytes.length && !sawEnd) {
    const length = readU32(bytes, at);
    if (at + 12 + length > bytes.length) {
      throw new PngFormatError("truncated chunk");
    }
    const type = String.fromCharCode(bytes[at + 4], bytes[at + 5], bytes[at + 6], bytes[at + 7]);
    const crc = readU32(bytes, at + 8 + length);
    if (crc !== crc32(bytes, at + 4, at + 8 + length)) {
      throw new PngFormatError(`CRC mismatch in ${type} chunk`);
    }
    const data = bytes.subarray(at + 8, at + 8 + length);
    if (type === "IHDR") {
      if (length !== 13) throw new PngFormatError("bad IHDR length");
      const interlace = data[12];
      if (data[10] !== 0 || data[11] !== 0) {
        throw new PngFormatError("unsupported compression or filter method");
      }
      if (interlace !== 0) throw new PngFormatError("interlaced PNGs are not supported");
      header = {
        width: readU32(data, 0),
        height: readU32(data, 4),
        bitDepth: data[8],
        colorType: data[9],
      };
    } else if (type === "PLTE") {
      palette = data.slice();
    } else if (type === "IDAT") {
      idatParts.push(data.slice());
    } else if (type === "IEND") {
      sawEnd = true;
    }
    at += 12 + length;
  }
  if (header === null) throw new PngFormatError("missing IHDR");
  if (!sawEnd) throw new PngFormatError("missing IEND");
  if (header.width === 0 || header.height === 0) {
    throw new PngFormatError("degenerate image dimensions");
  }
  let total = 0;
  for (const part of idatParts) total += part.length;
  const idat = new Uint8Array(total);
  let off = 0;
  for (const part of idatParts) {
    idat.set(part, off);
    off += part.length;
  }
  return { ...header, palette, idat };
}

async function inflate(bytes: Uint8Array): Promise<Uint8Array> {
  const src = new Blob([bytes as BlobPart]).stream();
  const inflated = src.pipeThrough(new DecompressionStream("deflate"));
  return new Uint8Array(await new Response(inflated).arrayBuffer());
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

/** Undo per-scanline filtering in place; returns h * stride raw bytes. */
function unfilter(data: Uint8Array, width: number, height: number, bpp: number): Uint8Array {
  const stride = width * bpp;
  if (data.length !== height * (stride + 1)) {
    throw new PngFormatError(
      `decompressed size ${data.length} does not match ${height} rows of ${stride + 1}`);
  }
  const out = new Uint8Array(height * stride);
  for (let y = 0; y < height; y++) {
    const filter = data[y * (stride + 1)];
    const row = data.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
    const cur = y * stride;
    const prev = cur - stride;
    for (let i = 0; i < stride; i++) {
      const a = i >= bpp ? out[cur + i - bpp] : 0;
      const b = y > 0 ? out[prev + i] : 0;
      const c = y > 0 && i >= bpp ? out[prev + i - bpp] : 0;
      let v: number;
      switch (filter) {
        case 0: v = row[i]; break;
        case 1: v = row[i] + a; break;
        case 2: v = row[i] + b; break;
        case 3: v = row[i] + ((a + b) >> 1); break;
        case 4: v = row[i] + paeth(a, b, c); break;
        default: throw new PngFormatError(`unknown filter type ${filter}`);
      }
      out[cur + i] = v & 255;
    }
  }
  return out;
}

/** Decode a 16-bit grayscale probability PNG (format=prob16). */
export async function decodeProb16(bytes: Uint8Array): Promise<Prob16Image> {
  const chunks = splitChunks(bytes);
  if (chunks.colorType !== 0 || chunks.bitDepth !== 16) {
    throw new PngFormatError(
      `expected 16-bit grayscale, got color type ${chunks.colorType} depth ${chunks.bitDepth}`);
  }
  const raw = unfilter(await inflate(chunks.idat), chunks.width, chunks.height, 2);
  const values = new Uint16Array(chunks.width * chunks.height);
  for (let i = 0; i < values.length; i++) {
    values[i] = (raw[2 * i] << 8) | raw[2 * i + 1];
  }
  return { width: chunks.width, height: chunks.height, values };
}

/** Decode an 8-bit palette label PNG (format=labels, scribble masks). */
export async function decodeLabelPng(bytes: Uint8Array): Promise<LabelImage> {
  const chunks = splitChunks(bytes);
  if (chunks.colorType !== 3 || chunks.bitDepth !== 8) {
    throw new PngFormatError(
      `expected an 8-bit palette PNG, got color type ${chunks.colorType} depth ${chunks.bitDepth}`);
  }
  if (chunks.palette === null) throw new PngFormatError("palette PNG without PLTE");
  const labels = unfilter(await inflate(chunks.idat), chunks.width, chunks.height, 1);
  return {
    width: chunks.width,
    height: chunks.height,
    labels,
    palette: chunks.palette,
  };
}
