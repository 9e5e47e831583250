#!/usr/bin/env node
/**
 * deap_convert --in sXX.dat --out DIR [--subject N]
 *
 * Exit codes mirror the engine CLI: 0 success, 1 usage/config error,
 * 2 I/O error, 3 malformed data (wrong shapes, bad pickle, ratings range).
 */

import * as fs from "fs";

import { DataShapeError, convert, subjectIdFromFilename } from "./convert";

function parseArgs(argv: string[]): { inFile: string; outDir: string; subject?: number } {
  let inFile: string | undefined;
  let outDir: string | undefined;
  let subject: number | undefined;
  for (let i = 0; i < argv.length; i++) {
    const a = argv[i];
    if (a === "--in") inFile = argv[++i];
    else if (a === "--out") outDir = argv[++i];
    else if (a === "--subject") subject = parseInt(argv[++i], 10);
    else throw new Error(`unknown argument ${a}`);
  }
  if (!inFile || !outDir) throw new Error("usage: deap_convert --in sXX.dat --out DIR [--subject N]");
  if (subject !== undefined && !(Number.isInteger(subject) && subject >= 0)) {
    throw new Error(`--subject must be a non-negative integer`);
  }
  return { inFile, outDir, subject };
}

export function main(argv: string[]): number {
  let args;
  try {
    args = parseArgs(argv);
  } catch (e) {
    process.stderr.write(`error kind=config reason="${(e as Error).message}"\n`);
    return 1;
  }
  try {
    const subject = args.subject ?? subjectIdFromFilename(args.inFile);
    if (!fs.existsSync(args.inFile)) {
      throw Object.assign(new Error(`no such file: ${args.inFile}`), { code: "ENOENT" });
    }
    const written = convert(args.inFile, args.outDir, subject);
    process.stdout.write(`converted subject ${subject}: ${written.length} files in ${args.outDir}\n`);
    return 0;
  } catch (e) {
    const err = e as NodeJS.ErrnoException;
    if (e instanceof DataShapeError) {
      process.stderr.write(`error kind=numerical reason="${err.message}"\n`);
      return 3;
    }
    if (err.code === "ENOENT" || err.code === "EACCES" || err.code === "EISDIR") {
      process.stderr.write(`error kind=io reason="${err.message}"\n`);
      return 2;
    }
    process.stderr.write(`error kind=config reason="${err.message}"\n`);
    return 1;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
