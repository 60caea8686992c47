/** Shared plumbing for the suite: locating the fixture gateway and
 * decoding served PNGs into the RGBA layout the viewer reads. */

import { readFileSync } from 'node:fs';
import path from 'node:path';
import { fileURLToPath } from 'node:url';
import { PNG } from 'pngjs';

export interface Fixture {
  url: string;
  annotationCase: string;
}

export function fixtureInfo(): Fixture {
  const file = path.resolve(
    fileURLToPath(new URL('.', import.meta.url)),
    '..',
    '.tmp',
    'gateway.json',
  );
  return JSON.parse(readFileSync(file, 'utf8')) as Fixture;
}

export interface DecodedPng {
  width: number;
  height: number;
  rgba: Uint8ClampedArray;
}

export async function decodePng(blob: Blob): Promise<DecodedPng> {
  const png = PNG.sync.read(Buffer.from(await blob.arrayBuffer()));
  return {
    width: png.width,
    height: png.height,
    rgba: new Uint8ClampedArray(png.data.buffer, png.data.byteOffset, png.data.length),
  };
}
