/**
 * Conversion: one DEAP preprocessed subject archive (pickle with a
 * 40x40x8064 'data' array and a 40x4 'labels' array) becomes 40 per-trial
 * NTF tensors plus one ratings sidecar. No filtering, channel selection, or
 * rescaling happens here — bytes are reinterpreted (float64 -> float32) and
 * nothing else; all signal processing belongs to the downstream engine.
 *
 * Outputs are staged in a temporary directory and renamed into place only
 * after every file is written, so a failed conversion leaves nothing behind.
 */

import * as fs from "fs";
import * as os from "os";
import * as path from "path";

import { NdArrayStub, PickleError, ndarrayToFloat64, pickleLoads } from "./pickle";
import { ntfBytes } from "./ntf";

export const TRIALS = 40;
export const CHANNELS = 40;
export const SAMPLES = 8064;
export const SAMPLE_RATE = 128;
export const RATING_COLUMNS = ["valence", "arousal", "dominance", "liking"] as const;

export class DataShapeError extends Error {}

export interface SubjectArchive {
  data: Float64Array; // (40, 40, 8064) flattened C-order
  labels: Float64Array; // (40, 4) flattened C-order
}

function expectArray(value: unknown, key: string, shape: number[]): Float64Array {
  if (!(value instanceof NdArrayStub)) {
    throw new DataShapeError(`archive key '${key}' is not an ndarray`);
  }
  const got = value.shape;
  const same = got.length === shape.length && got.every((d, i) => d === shape[i]);
  if (!same) {
    throw new DataShapeError(
      `archive key '${key}' has shape (${got.join(", ")}), expected (${shape.join(", ")})`
    );
  }
  return ndarrayToFloat64(value);
}

export function loadArchive(file: string): SubjectArchive {
  const raw = fs.readFileSync(file);
  let top: unknown;
  try {
    top = pickleLoads(new Uint8Array(raw.buffer, raw.byteOffset, raw.byteLength));
  } catch (e) {
    if (e instanceof PickleError) throw new DataShapeError(`cannot parse archive: ${e.message}`);
    throw e;
  }
  if (!(top instanceof Map)) {
    throw new DataShapeError("archive does not contain a dict at the top level");
  }
  const data = expectArray(top.get("data"), "data", [TRIALS, CHANNELS, SAMPLES]);
  const labels = expectArray(top.get("labels"), "labels", [TRIALS, 4]);
  for (let i = 0; i < labels.length; i++) {
    if (!(labels[i] >= 1 && labels[i] <= 9)) {
      throw new DataShapeError(`rating ${labels[i]} at index ${i} is outside [1, 9]`);
    }
  }
  return { data, labels };
}

export function subjectIdFromFilename(file: string): number {
  const m = path.basename(file).match(/s(\d+)\.(dat|pkl|pickle)$/i);
  if (!m) {
    throw new Error(
      `cannot infer the subject number from '${path.basename(file)}'; pass --subject`
    );
  }
  return parseInt(m[1], 10);
}

export interface RatingsEntry {
  subject: number;
  trial: number;
  valence: number;
  arousal: number;
  dominance: number;
  liking: number;
  sample_rate: number;
}

export function convert(inFile: string, outDir: string, subject: number): string[] {
  const archive = loadArchive(inFile);
  const staging = fs.mkdtempSync(path.join(os.tmpdir(), "deap-convert-"));
  const written: string[] = [];
  try {
    const trialValues = CHANNELS * SAMPLES;
    const entries: RatingsEntry[] = [];
    for (let t = 0; t < TRIALS; t++) {
      const trial = new Float32Array(trialValues);
      const base = t * trialValues;
      for (let i = 0; i < trialValues; i++) trial[i] = Math.fround(archive.data[base + i]);
      const name = `s${String(subject).padStart(2, "0")}_t${String(t).padStart(2, "0")}.ntf`;
      fs.writeFileSync(path.join(staging, name), ntfBytes(trial, [CHANNELS, SAMPLES]));
      written.push(name);
      entries.push({
        subject,
        trial: t,
        valence: archive.labels[t * 4],
        arousal: archive.labels[t * 4 + 1],
        dominance: archive.labels[t * 4 + 2],
        liking: archive.labels[t * 4 + 3],
        sample_rate: SAMPLE_RATE,
      });
    }
    const sidecar = `s${String(subject).padStart(2, "0")}_ratings.json`;
    fs.writeFileSync(path.join(staging, sidecar), JSON.stringify(entries, null, 2) + "\n");
    written.push(sidecar);

    fs.mkdirSync(outDir, { recursive: true });
    for (const name of written) {
      fs.renameSync(path.join(staging, name), path.join(outDir, name));
    }
    return written;
  } finally {
    fs.rmSync(staging, { recursive: true, force: true });
  }
}
