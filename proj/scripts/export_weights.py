#!/usr/bin/env python3
"""Convert pretrained checkpoints into zsad tensor archives.

  export_weights.py clip   STATE_DICT OUT.zarc --id vit-l-14-336 [--act quick_gelu|gelu] [--vocab words.json]
  export_weights.py dinov2 STATE_DICT OUT.zarc --id dinov2-vitl14 [--image-size 518]

STATE_DICT is a torch file holding a plain state dict, with open_clip key
names for `clip` and facebookresearch/dinov2 key names for `dinov2`. The
archive layout is

  "ZSADARC1" | u64 header_len | header JSON | payload | u64 FNV-1a

with row-major float64 tensors and 1-D tensors stored as 1 x n.
"""

import argparse
import json
import struct
import sys

import numpy as np
import torch

MAGIC = b"ZSADARC1"
CLIP_MEAN = [0.48145466, 0.4578275, 0.40821073]
CLIP_STD = [0.26862954, 0.26130258, 0.27577711]
IMAGENET_MEAN = [0.485, 0.456, 0.406]
IMAGENET_STD = [0.229, 0.224, 0.225]
# Stem words used by the prompt bank.
DEFAULT_WORDS = ["object", "damaged"]


def _fnv1a_py(buf) -> int:
    h = 0xCBF29CE484222325
    for x in buf:
        h = ((h ^ int(x)) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def fnv1a(data: bytes) -> int:
    """64-bit FNV-1a; compiled with numba when available (weight files are large)."""
    buf = np.frombuffer(data, dtype=np.uint8)
    try:
        import numba
    except ImportError:
        return _fnv1a_py(buf)

    @numba.njit
    def run(b):
        h = np.uint64(0xCBF29CE484222325)
        p = np.uint64(0x100000001B3)
        for x in b:
            h = (h ^ np.uint64(x)) * p
        return h

    return int(run(buf))


class Archive:
    def __init__(self, meta):
        self.meta = meta
        self.tensors = []

    def put(self, name, value):
        a = value.detach().cpu().double().numpy() if torch.is_tensor(value) else np.asarray(value, dtype=np.float64)
        if a.ndim == 1:
            a = a.reshape(1, -1)
        elif a.ndim != 2:
            a = a.reshape(a.shape[0], -1)
        self.tensors.append((name, np.ascontiguousarray(a)))

    def save(self, path):
        table, chunks, offset = [], [], 0
        for name, a in self.tensors:
            table.append({"name": name, "rows": a.shape[0], "cols": a.shape[1], "dtype": "f64", "offset": offset})
            raw = a.astype("<f8").tobytes()
            chunks.append(raw)
            offset += len(raw)
        header = json.dumps({"meta": self.meta, "tensors": table}, separators=(",", ":")).encode()
        body = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)
        digest = fnv1a(body)
        with open(path, "wb") as f:
            f.write(body + struct.pack("<Q", digest))


def shape_meta(width, layers, heads, hidden, act, eps):
    return {"width": width, "layers": layers, "heads": heads, "mlp_hidden": hidden, "act": act, "ln_eps": eps}


def put_clip_block(a, prefix, sd, src):
    a.put(prefix + "ln1_g", sd[src + "ln_1.weight"])
    a.put(prefix + "ln1_b", sd[src + "ln_1.bias"])
    a.put(prefix + "in_proj_w", sd[src + "attn.in_proj_weight"])
    a.put(prefix + "in_proj_b", sd[src + "attn.in_proj_bias"])
    a.put(prefix + "out_w", sd[src + "attn.out_proj.weight"])
    a.put(prefix + "out_b", sd[src + "attn.out_proj.bias"])
    a.put(prefix + "ln2_g", sd[src + "ln_2.weight"])
    a.put(prefix + "ln2_b", sd[src + "ln_2.bias"])
    a.put(prefix + "fc_w", sd[src + "mlp.c_fc.weight"])
    a.put(prefix + "fc_b", sd[src + "mlp.c_fc.bias"])
    a.put(prefix + "proj_w", sd[src + "mlp.c_proj.weight"])
    a.put(prefix + "proj_b", sd[src + "mlp.c_proj.bias"])


def count_layers(sd, prefix):
    n = 0
    while f"{prefix}{n}." + "ln_1.weight" in sd or f"{prefix}{n}.norm1.weight" in sd:
        n += 1
    return n


def tokenize_words(words, vocab_file):
    if vocab_file:
        with open(vocab_file) as f:
            return json.load(f)
    try:
        from open_clip.tokenizer import SimpleTokenizer
    except ImportError:
        sys.exit("open_clip is not installed; pass --vocab with a {word: [token ids]} file")
    tok = SimpleTokenizer()
    return {w: tok.encode(w) for w in words}


def export_clip(sd, args):
    w = sd["visual.conv1.weight"]
    width, _, patch, _ = w.shape
    grid = int(round((sd["visual.positional_embedding"].shape[0] - 1) ** 0.5))
    v_layers = count_layers(sd, "visual.transformer.resblocks.")
    v_hidden = sd["visual.transformer.resblocks.0.mlp.c_fc.weight"].shape[0]
    out_dim = sd["visual.proj"].shape[1]
    t_width = sd["token_embedding.weight"].shape[1]
    t_layers = count_layers(sd, "transformer.resblocks.")
    t_hidden = sd["transformer.resblocks.0.mlp.c_fc.weight"].shape[0]
    meta = {
        "kind": "backbone",
        "id": args.id,
        "visual": {
            "shape": shape_meta(width, v_layers, args.heads or width // 64, v_hidden, args.act, 1e-5),
            "patch_px": patch,
            "image_size": grid * patch,
            "out_dim": out_dim,
            "mean": CLIP_MEAN,
            "std": CLIP_STD,
        },
        "text": {
            "shape": shape_meta(t_width, t_layers, args.text_heads or t_width // 64, t_hidden, args.act, 1e-5),
            "context_length": sd["positional_embedding"].shape[0],
            "out_dim": sd["text_projection"].shape[1],
            "sos_id": args.sos_id,
            "eos_id": args.eos_id,
            "pad_id": 0,
            "vocabulary": tokenize_words(DEFAULT_WORDS, args.vocab),
        },
    }
    a = Archive(meta)
    a.put("visual.patch_w", w.reshape(width, -1))
    a.put("visual.class_embedding", sd["visual.class_embedding"])
    a.put("visual.positional_embedding", sd["visual.positional_embedding"])
    a.put("visual.ln_pre_g", sd["visual.ln_pre.weight"])
    a.put("visual.ln_pre_b", sd["visual.ln_pre.bias"])
    for i in range(v_layers):
        put_clip_block(a, f"visual.blocks.{i}.", sd, f"visual.transformer.resblocks.{i}.")
    a.put("visual.ln_post_g", sd["visual.ln_post.weight"])
    a.put("visual.ln_post_b", sd["visual.ln_post.bias"])
    a.put("visual.projection", sd["visual.proj"])
    a.put("text.token_embedding", sd["token_embedding.weight"])
    a.put("text.positional_embedding", sd["positional_embedding"])
    for i in range(t_layers):
        put_clip_block(a, f"text.blocks.{i}.", sd, f"transformer.resblocks.{i}.")
    a.put("text.ln_final_g", sd["ln_final.weight"])
    a.put("text.ln_final_b", sd["ln_final.bias"])
    a.put("text.projection", sd["text_projection"])
    return a


def export_dinov2(sd, args):
    w = sd["patch_embed.proj.weight"]
    width, _, patch, _ = w.shape
    layers = count_layers(sd, "blocks.")
    hidden = sd["blocks.0.mlp.fc1.weight"].shape[0]
    pos = sd["pos_embed"].reshape(-1, width)
    meta = {
        "kind": "spatial",
        "id": args.id,
        "visual": {
            "shape": shape_meta(width, layers, args.heads or width // 64, hidden, "gelu", 1e-6),
            "patch_px": patch,
            "image_size": args.image_size,
            "out_dim": width,
            "mean": IMAGENET_MEAN,
            "std": IMAGENET_STD,
        },
    }
    a = Archive(meta)
    a.put("visual.patch_w", w.reshape(width, -1))
    a.put("visual.patch_b", sd["patch_embed.proj.bias"])
    a.put("visual.class_embedding", sd["cls_token"].reshape(1, width))
    a.put("visual.positional_embedding", pos)
    for i in range(layers):
        s, p = f"blocks.{i}.", f"visual.blocks.{i}."
        a.put(p + "ln1_g", sd[s + "norm1.weight"])
        a.put(p + "ln1_b", sd[s + "norm1.bias"])
        a.put(p + "in_proj_w", sd[s + "attn.qkv.weight"])
        a.put(p + "in_proj_b", sd[s + "attn.qkv.bias"])
        a.put(p + "out_w", sd[s + "attn.proj.weight"])
        a.put(p + "out_b", sd[s + "attn.proj.bias"])
        a.put(p + "ln2_g", sd[s + "norm2.weight"])
        a.put(p + "ln2_b", sd[s + "norm2.bias"])
        a.put(p + "fc_w", sd[s + "mlp.fc1.weight"])
        a.put(p + "fc_b", sd[s + "mlp.fc1.bias"])
        a.put(p + "proj_w", sd[s + "mlp.fc2.weight"])
        a.put(p + "proj_b", sd[s + "mlp.fc2.bias"])
        a.put(p + "ls1", sd[s + "ls1.gamma"])
        a.put(p + "ls2", sd[s + "ls2.gamma"])
    a.put("visual.ln_post_g", sd["norm.weight"])
    a.put("visual.ln_post_b", sd["norm.bias"])
    return a


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("kind", choices=["clip", "dinov2"])
    ap.add_argument("state_dict")
    ap.add_argument("out")
    ap.add_argument("--id", required=True, help="backbone id recorded in checkpoints")
    ap.add_argument("--act", default="quick_gelu", choices=["quick_gelu", "gelu"])
    ap.add_argument("--heads", type=int, default=0, help="visual heads (default width / 64)")
    ap.add_argument("--text-heads", type=int, default=0, help="text heads (default width / 64)")
    ap.add_argument("--vocab", help="json {word: [token ids]} instead of the open_clip tokenizer")
    ap.add_argument("--sos-id", type=int, default=49406)
    ap.add_argument("--eos-id", type=int, default=49407)
    ap.add_argument("--image-size", type=int, default=518)
    args = ap.parse_args()

    sd = torch.load(args.state_dict, map_location="cpu")
    if "state_dict" in sd:
        sd = sd["state_dict"]
    archive = export_clip(sd, args) if args.kind == "clip" else export_dinov2(sd, args)
    archive.save(args.out)
    print(f"wrote {args.out} ({len(archive.tensors)} tensors)")


if __name__ == "__main__":
    main()
