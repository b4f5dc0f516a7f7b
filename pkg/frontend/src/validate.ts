#!/usr/bin/env node
import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { dirname, resolve } from "node:path";

import { loadCheckpoint, type Checkpoint } from "./safetensors.js";
import { forward, type TinyDecoderArch } from "./tinynet.js";

export interface ValidationResult {
  loaded: boolean;
  loaderError: string | null;
  missingTensors: string[];
  unexpectedTensors: string[];
  shapeDiffs: { name: string; expected: number[]; actual: number[] }[];
  dtypeDiffs: { name: string; expected: string; actual: string }[];
  /** Only present when the checkpoint loaded and all shapes match. */
  forwardMaxAbsDelta: number | null;
  valid: boolean;
}

interface Manifest {
  tensors: Record<string, { dtype: string; shape: number[] }>;
}

interface Reference {
  input: number[][];
  output: number[][];
  tolerance: number;
}

function structuralDiffs(ckpt: Checkpoint, manifest: Manifest) {
  const missingTensors: string[] = [];
  const shapeDiffs: ValidationResult["shapeDiffs"] = [];
  const dtypeDiffs: ValidationResult["dtypeDiffs"] = [];
  for (const [name, want] of Object.entries(manifest.tensors)) {
    const got = ckpt.get(name);
    if (!got) {
      missingTensors.push(name);
      continue;
    }
    if (got.shape.length !== want.shape.length || got.shape.some((d, i) => d !== want.shape[i])) {
      shapeDiffs.push({ name, expected: want.shape, actual: got.shape });
    }
    if (got.dtype !== want.dtype) {
      dtypeDiffs.push({ name, expected: want.dtype, actual: got.dtype });
    }
  }
  const unexpectedTensors = [...ckpt.keys()].filter((n) => !(n in manifest.tensors));
  return { missingTensors, unexpectedTensors, shapeDiffs, dtypeDiffs };
}

export function validateCheckpoint(
  mergedPath: string,
  manifestPath: string,
  referencePath: string,
  archPath: string
): ValidationResult {
  const manifest: Manifest = JSON.parse(readFileSync(manifestPath, "utf-8"));
  const reference: Reference = JSON.parse(readFileSync(referencePath, "utf-8"));
  const arch: TinyDecoderArch = JSON.parse(readFileSync(archPath, "utf-8"));

  let ckpt: Checkpoint;
  try {
    ckpt = loadCheckpoint(mergedPath);
  } catch (err) {
    return {
      loaded: false,
      loaderError: String(err),
      missingTensors: [],
      unexpectedTensors: [],
      shapeDiffs: [],
      dtypeDiffs: [],
      forwardMaxAbsDelta: null,
      valid: false,
    };
  }

  const diffs = structuralDiffs(ckpt, manifest);
  const structurallyClean =
    diffs.missingTensors.length === 0 &&
    diffs.unexpectedTensors.length === 0 &&
    diffs.shapeDiffs.length === 0 &&
    diffs.dtypeDiffs.length === 0;

  let forwardMaxAbsDelta: number | null = null;
  if (diffs.missingTensors.length === 0 && diffs.shapeDiffs.length === 0) {
    const got = forward(arch, ckpt, reference.input);
    let max = 0;
    for (let r = 0; r < got.length; r++) {
      for (let c = 0; c < got[r].length; c++) {
        max = Math.max(max, Math.abs(got[r][c] - reference.output[r][c]));
      }
    }
    forwardMaxAbsDelta = max;
  }

  const valid =
    structurallyClean && forwardMaxAbsDelta !== null && forwardMaxAbsDelta <= reference.tolerance;
  return { loaded: true, loaderError: null, ...diffs, forwardMaxAbsDelta, valid };
}

function parseArgs(argv: string[]): Record<string, string> {
  const args: Record<string, string> = {};
  for (let i = 0; i < argv.length; i += 2) {
    const flag = argv[i];
    if (!flag.startsWith("--") || i + 1 >= argv.length) {
      throw new Error(`usage: interop-validate --merged F --manifest F --reference F [--arch F]`);
    }
    args[flag.slice(2)] = argv[i + 1];
  }
  return args;
}

export function main(argv: string[]): number {
  let args: Record<string, string>;
  try {
    args = parseArgs(argv);
    for (const required of ["merged", "manifest", "reference"]) {
      if (!(required in args)) throw new Error(`missing --${required}`);
    }
  } catch (err) {
    process.stderr.write(`${err instanceof Error ? err.message : err}\n`);
    return 2;
  }
  const here = dirname(fileURLToPath(import.meta.url));
  const archPath = args.arch ?? resolve(here, "..", "..", "shared", "tiny_decoder_arch.json");
  const result = validateCheckpoint(args.merged, args.manifest, args.reference, archPath);
  process.stdout.write(JSON.stringify(result, null, 2) + "\n");
  return result.valid ? 0 : 1;
}

if (process.argv[1] && fileURLToPath(import.meta.url) === resolve(process.argv[1])) {
  process.exit(main(process.argv.slice(2)));
}
