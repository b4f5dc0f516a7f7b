import type { Checkpoint } from "./safetensors.js";

export interface TinyDecoderArch {
  hidden_size: number;
  num_layers: number;
  seq_len: number;
  name_template: string;
  blocks: Record<string, string[]>;
}

export type Matrix = number[][];

function tensorName(arch: TinyDecoderArch, layer: number, block: string, proj: string): string {
  return arch.name_template
    .replace("{layer}", String(layer))
    .replace("{block}", block)
    .replace("{proj}", proj);
}

export function expectedTensorNames(arch: TinyDecoderArch): string[] {
  const names: string[] = [];
  for (let layer = 0; layer < arch.num_layers; layer++) {
    for (const [block, projs] of Object.entries(arch.blocks)) {
      for (const proj of projs) names.push(tensorName(arch, layer, block, proj));
    }
  }
  return names;
}

/** y = x @ transpose(W), W stored row-major as [out, in]. */
function linear(x: Matrix, w: Float64Array, hidden: number): Matrix {
  return x.map((row) => {
    const out = new Array<number>(hidden);
    for (let o = 0; o < hidden; o++) {
      let acc = 0;
      for (let i = 0; i < hidden; i++) acc += row[i] * w[o * hidden + i];
      out[o] = acc;
    }
    return out;
  });
}

function addInPlace(a: Matrix, b: Matrix): void {
  for (let r = 0; r < a.length; r++) {
    for (let c = 0; c < a[r].length; c++) a[r][c] += b[r][c];
  }
}

/**
 * Forward pass of the tiny decoder stack: per layer, causal softmax
 * self-attention (scaled 1/sqrt(hidden)) with a residual, then a relu MLP
 * with a residual.
 */
export function forward(arch: TinyDecoderArch, ckpt: Checkpoint, input: Matrix): Matrix {
  const h = arch.hidden_size;
  const scale = 1 / Math.sqrt(h);
  const weight = (layer: number, block: string, proj: string): Float64Array => {
    const entry = ckpt.get(tensorName(arch, layer, block, proj));
    if (!entry) throw new Error(`missing tensor ${tensorName(arch, layer, block, proj)}`);
    return entry.values;
  };

  let x = input.map((row) => [...row]);
  for (let layer = 0; layer < arch.num_layers; layer++) {
    const q = linear(x, weight(layer, "self_attn", "q_proj"), h);
    const k = linear(x, weight(layer, "self_attn", "k_proj"), h);
    const v = linear(x, weight(layer, "self_attn", "v_proj"), h);
    const seq = x.length;
    const attended: Matrix = [];
    for (let i = 0; i < seq; i++) {
      // causal: position i attends to positions 0..i only
      const scores: number[] = [];
      let max = -Infinity;
      for (let j = 0; j <= i; j++) {
        let dot = 0;
        for (let d = 0; d < h; d++) dot += q[i][d] * k[j][d];
        const s = dot * scale;
        scores.push(s);
        if (s > max) max = s;
      }
      let denom = 0;
      const probs = scores.map((s) => {
        const e = Math.exp(s - max);
        denom += e;
        return e;
      });
      const row = new Array<number>(h).fill(0);
      for (let j = 0; j <= i; j++) {
        const p = probs[j] / denom;
        for (let d = 0; d < h; d++) row[d] += p * v[j][d];
      }
      attended.push(row);
    }
    addInPlace(x, linear(attended, weight(layer, "self_attn", "o_proj"), h));
    const up = linear(x, weight(layer, "mlp", "up_proj"), h).map((row) =>
      row.map((v2) => Math.max(v2, 0))
    );
    addInPlace(x, linear(up, weight(layer, "mlp", "down_proj"), h));
  }
  return x;
}
