/**
 * Binary embedding store, wire-compatible with the Python reader.
 *
 * Layout (all little-endian): 5-byte magic "TMEB1", uint32 dimension,
 * uint64 record count, then per record a uint32 key length, UTF-8 key
 * bytes, one modality byte (0 = image, 1 = text), and `dimension`
 * float32 values.
 */

export const MAGIC = Buffer.from("TMEB1", "ascii");
export const MODALITY_IMAGE = 0;
export const MODALITY_TEXT = 1;

export interface StoreRecord {
  key: string;
  modality: number;
  vector: Float32Array;
}

export function encodeStore(dim: number, records: StoreRecord[]): Buffer {
  const parts: Buffer[] = [];
  const header = Buffer.alloc(MAGIC.length + 4 + 8);
  MAGIC.copy(header, 0);
  header.writeUInt32LE(dim, MAGIC.length);
  header.writeBigUInt64LE(BigInt(records.length), MAGIC.length + 4);
  parts.push(header);
  const seen = new Set<string>();
  for (const record of records) {
    if (seen.has(record.key)) {
      throw new Error(`duplicate embedding key ${JSON.stringify(record.key)}`);
    }
    seen.add(record.key);
    if (record.vector.length !== dim) {
      throw new Error(
        `vector for ${record.key} has ${record.vector.length} values, expected ${dim}`,
      );
    }
    if (record.modality !== MODALITY_IMAGE && record.modality !== MODALITY_TEXT) {
      throw new Error(`invalid modality ${record.modality} for ${record.key}`);
    }
    const keyBytes = Buffer.from(record.key, "utf-8");
    const head = Buffer.alloc(4 + keyBytes.length + 1);
    head.writeUInt32LE(keyBytes.length, 0);
    keyBytes.copy(head, 4);
    head.writeUInt8(record.modality, 4 + keyBytes.length);
    parts.push(head);
    const values = Buffer.alloc(4 * dim);
    for (let i = 0; i < dim; i++) {
      values.writeFloatLE(record.vector[i], 4 * i);
    }
    parts.push(values);
  }
  return Buffer.concat(parts);
}

/** Self-check reader; mirrors the Python-side validation. */
export function decodeStore(data: Buffer): { dim: number; records: StoreRecord[] } {
  if (data.length < MAGIC.length + 12) {
    throw new Error(`store shorter than the ${MAGIC.length + 12}-byte header`);
  }
  if (!data.subarray(0, MAGIC.length).equals(MAGIC)) {
    throw new Error(`bad magic ${JSON.stringify(data.subarray(0, 5).toString())}`);
  }
  const dim = data.readUInt32LE(MAGIC.length);
  const count = Number(data.readBigUInt64LE(MAGIC.length + 4));
  let offset = MAGIC.length + 12;
  const records: StoreRecord[] = [];
  const seen = new Set<string>();
  for (let i = 0; i < count; i++) {
    if (offset + 4 > data.length) {
      throw new Error(`truncated key length at offset ${offset}`);
    }
    const keyLen = data.readUInt32LE(offset);
    offset += 4;
    const end = offset + keyLen + 1 + 4 * dim;
    if (end > data.length) {
      throw new Error(`truncated record at offset ${offset}`);
    }
    const key = data.subarray(offset, offset + keyLen).toString("utf-8");
    offset += keyLen;
    const modality = data.readUInt8(offset);
    offset += 1;
    const vector = new Float32Array(dim);
    for (let j = 0; j < dim; j++) {
      vector[j] = data.readFloatLE(offset + 4 * j);
    }
    offset += 4 * dim;
    if (seen.has(key)) {
      throw new Error(`duplicate key ${key}`);
    }
    seen.add(key);
    records.push({ key, modality, vector });
  }
  if (offset !== data.length) {
    throw new Error(`${data.length - offset} trailing bytes after ${count} records`);
  }
  return { dim, records };
}
