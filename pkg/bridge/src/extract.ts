/**
 * The extraction pipeline: read a JSON-lines manifest of
 * {key, modality, path | text} entries, run the encoders, and write
 * the binary store plus a sidecar metadata file recording exactly
 * which encoders and settings produced it.
 *
 * Unreadable inputs skip their key with a log line; producing zero
 * embeddings is an error.
 */

import { promises as fs } from "node:fs";
import path from "node:path";

import { makeImageEncoder, makeTextEncoder } from "./encoders.js";
import { decodeImage } from "./images.js";
import { MODALITY_IMAGE, MODALITY_TEXT, StoreRecord, encodeStore } from "./store.js";

export interface BridgeConfig {
  manifestPath: string;
  outPath: string;
  dim: number;
  imageEncoderId: string;
  textEncoderId: string;
  maxTextTokens: number; // 200 by default; 400 when findings are included
  batchSize: number;
  deviceHint: string;
}

export const DEFAULT_CONFIG: Omit<BridgeConfig, "manifestPath" | "outPath"> = {
  dim: 64,
  imageEncoderId: "proj-image-v1",
  textEncoderId: "hash-text-v1",
  maxTextTokens: 200,
  batchSize: 16,
  deviceHint: "cpu",
};

export interface ManifestEntry {
  key: string;
  modality: "image" | "text";
  path?: string;
  text?: string;
}

export function parseManifest(raw: string, source: string): ManifestEntry[] {
  const entries: ManifestEntry[] = [];
  const lines = raw.split("\n");
  for (let i = 0; i < lines.length; i++) {
    const line = lines[i].trim();
    if (!line) continue;
    let parsed: unknown;
    try {
      parsed = JSON.parse(line);
    } catch (err) {
      throw new Error(`${source}:${i + 1}: not valid JSON (${err})`);
    }
    const entry = parsed as ManifestEntry;
    if (typeof entry.key !== "string" || !entry.key) {
      throw new Error(`${source}:${i + 1}: missing key`);
    }
    if (entry.modality !== "image" && entry.modality !== "text") {
      throw new Error(`${source}:${i + 1}: modality must be image or text`);
    }
    if (entry.modality === "image" && typeof entry.path !== "string") {
      throw new Error(`${source}:${i + 1}: image entries need a path`);
    }
    if (entry.modality === "text" && typeof entry.text !== "string"
        && typeof entry.path !== "string") {
      throw new Error(`${source}:${i + 1}: text entries need text or a path`);
    }
    entries.push(entry);
  }
  return entries;
}

export interface ExtractResult {
  written: number;
  skipped: { key: string; reason: string }[];
  outPath: string;
  metaPath: string;
}

export async function extractEmbeddings(cfg: BridgeConfig): Promise<ExtractResult> {
  const raw = await fs.readFile(cfg.manifestPath, "utf-8");
  const entries = parseManifest(raw, cfg.manifestPath);
  const imageEncoder = makeImageEncoder(cfg.imageEncoderId, cfg.dim);
  const textEncoder = makeTextEncoder(cfg.textEncoderId, cfg.dim);
  const records: StoreRecord[] = [];
  const skipped: { key: string; reason: string }[] = [];
  const baseDir = path.dirname(path.resolve(cfg.manifestPath));

  for (const entry of entries) {
    try {
      if (entry.modality === "image") {
        const imagePath = path.resolve(baseDir, entry.path!);
        const data = await fs.readFile(imagePath);
        const vector = imageEncoder.encodeImage(decodeImage(imagePath, data));
        records.push({ key: entry.key, modality: MODALITY_IMAGE, vector });
      } else {
        const text = entry.text
          ?? (await fs.readFile(path.resolve(baseDir, entry.path!), "utf-8"));
        const vector = textEncoder.encodeText(text, cfg.maxTextTokens);
        records.push({ key: entry.key, modality: MODALITY_TEXT, vector });
      }
    } catch (err) {
      const reason = err instanceof Error ? err.message : String(err);
      skipped.push({ key: entry.key, reason });
      console.error(`skip ${entry.key}: ${reason}`);
    }
  }
  if (records.length === 0) {
    throw new Error("no embeddings produced; every manifest entry failed");
  }
  await fs.writeFile(cfg.outPath, encodeStore(cfg.dim, records));
  const metaPath = `${cfg.outPath}.meta.json`;
  const meta = {
    image_encoder: imageEncoder.id,
    text_encoder: textEncoder.id,
    // built-in encoders have no projection head; a contrastive encoder
    // adapter must state pre- or post-projection here
    embedding_variant: "encoder-output (no projection head)",
    dim: cfg.dim,
    max_text_tokens: cfg.maxTextTokens,
    batch_size: cfg.batchSize,
    device_hint: cfg.deviceHint,
    written: records.length,
    skipped,
  };
  await fs.writeFile(metaPath, JSON.stringify(meta, null, 1) + "\n");
  return { written: records.length, skipped, outPath: cfg.outPath, metaPath };
}
