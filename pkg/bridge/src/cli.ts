#!/usr/bin/env node
/**
 * chronomodal-bridge: embed a manifest of images and report texts into
 * the binary store the Python side consumes.
 *
 *   chronomodal-bridge --manifest inputs.jsonl --out store.bin --dim 64
 */

import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { DEFAULT_CONFIG, extractEmbeddings } from "./extract.js";

async function main(): Promise<number> {
  const argv = await yargs(hideBin(process.argv))
    .option("manifest", {
      type: "string", demandOption: true,
      describe: "JSON-lines manifest: {key, modality, path | text}",
    })
    .option("out", {
      type: "string", demandOption: true,
      describe: "output store path",
    })
    .option("dim", { type: "number", default: DEFAULT_CONFIG.dim })
    .option("image-encoder", {
      type: "string", default: DEFAULT_CONFIG.imageEncoderId,
    })
    .option("text-encoder", {
      type: "string", default: DEFAULT_CONFIG.textEncoderId,
    })
    .option("max-text-tokens", {
      type: "number", default: DEFAULT_CONFIG.maxTextTokens,
      describe: "token budget per report (use 400 when findings are included)",
    })
    .option("batch-size", { type: "number", default: DEFAULT_CONFIG.batchSize })
    .option("device", { type: "string", default: DEFAULT_CONFIG.deviceHint })
    .strict()
    .help()
    .parse();

  if (argv["max-text-tokens"] <= 0) {
    console.error("error: --max-text-tokens must be positive");
    return 2;
  }
  try {
    const result = await extractEmbeddings({
      manifestPath: argv.manifest,
      outPath: argv.out,
      dim: argv.dim,
      imageEncoderId: argv["image-encoder"],
      textEncoderId: argv["text-encoder"],
      maxTextTokens: argv["max-text-tokens"],
      batchSize: argv["batch-size"],
      deviceHint: argv.device,
    });
    console.log(`wrote ${result.written} embeddings to ${result.outPath}`
      + (result.skipped.length ? ` (${result.skipped.length} skipped)` : ""));
    return 0;
  } catch (err) {
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

main().then((code) => {
  process.exitCode = code;
});
