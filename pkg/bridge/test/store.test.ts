import { describe, expect, it } from "vitest";

import { MODALITY_IMAGE, MODALITY_TEXT, decodeStore, encodeStore } from "../src/store.js";

function vec(...values: number[]): Float32Array {
  return Float32Array.from(values);
}

describe("store encoding", () => {
  it("round-trips records byte-identically", () => {
    const records = [
      { key: "img-a", modality: MODALITY_IMAGE, vector: vec(1, 2, 3) },
      { key: "txt-b", modality: MODALITY_TEXT, vector: vec(-0.5, 0.25, 0) },
    ];
    const encoded = encodeStore(3, records);
    const decoded = decodeStore(encoded);
    expect(decoded.dim).toBe(3);
    expect(decoded.records.map((r) => r.key)).toEqual(["img-a", "txt-b"]);
    expect(Array.from(decoded.records[1].vector)).toEqual([-0.5, 0.25, 0]);
    expect(encodeStore(decoded.dim, decoded.records).equals(encoded)).toBe(true);
  });

  it("writes a 17-byte header for an empty store", () => {
    expect(encodeStore(128, []).length).toBe(17);
  });

  it("rejects duplicate keys", () => {
    const record = { key: "k", modality: MODALITY_IMAGE, vector: vec(0, 0) };
    expect(() => encodeStore(2, [record, { ...record }])).toThrow(/duplicate/);
  });

  it("rejects wrong-width vectors", () => {
    expect(() => encodeStore(4, [
      { key: "k", modality: MODALITY_TEXT, vector: vec(1, 2) },
    ])).toThrow(/expected 4/);
  });

  it("detects bad magic and truncation when reading", () => {
    const good = encodeStore(2, [
      { key: "k", modality: MODALITY_IMAGE, vector: vec(1, 2) },
    ]);
    const flipped = Buffer.from(good);
    flipped[0] ^= 0xff;
    expect(() => decodeStore(flipped)).toThrow(/magic/);
    expect(() => decodeStore(good.subarray(0, good.length - 2))).toThrow(/truncated/);
    expect(() => decodeStore(Buffer.concat([good, Buffer.from("xx")])))
      .toThrow(/trailing/);
  });
});
