"""Complexity and padding report used by ``dscloop analyze``."""

from __future__ import annotations

from typing import Sequence, Tuple

from .codec import padding_impact_block, padding_impact_frame
from .network import Model, dsc_to_std_ratio, flops_count, macs_per_pixel, param_count, receptive_border

FRAME_SIZES: Tuple[Tuple[int, int], ...] = ((416, 240), (832, 480), (1280, 720), (1920, 1080), (2560, 1600))
BLOCK_SIZES: Tuple[int, ...] = (32, 64, 128)


def report(model: Model, width: int = 1280, height: int = 720, ctu: int = 64,
           frames: Sequence[Tuple[int, int]] = FRAME_SIZES, blocks: Sequence[int] = BLOCK_SIZES) -> dict:
    pc = param_count(model)
    macs = flops_count(model, width, height)
    a = receptive_border(model)
    c_out = model.layers[-1].pointwise.out_ch
    return {
        "dsc_layers": len(model.layers),
        "feature_maps": c_out,
        "folded": model.folded,
        "params_total": pc.total,
        "params_blocks": list(pc.blocks),
        "macs_per_pixel": macs_per_pixel(model),
        "width": width,
        "height": height,
        "macs": macs,
        "flops_2x": 2 * macs,
        "dsc_to_std_ratio": dsc_to_std_ratio(c_out),
        "dsc_to_std_ratio_single_output": dsc_to_std_ratio(1),
        "border": a,
        "ctu": ctu,
        "padding_frame": [
            {"width": w, "height": h, "share": padding_impact_frame(w, h, a)} for w, h in frames
        ],
        "padding_block": [
            dict(zip(("size", "exact", "approx"), (b, *padding_impact_block(b, a)))) for b in blocks if 2 * a <= b
        ],  # smaller blocks lie entirely inside the affected border
    }


def format_report(r: dict) -> str:
    lines = [
        f"model: {r['dsc_layers']} DSC layers x {r['feature_maps']} maps ({'folded' if r['folded'] else 'unfolded'})",
        "params per block: " + ", ".join(f"{b:,}" for b in r["params_blocks"]),
        f"Sum {r['params_total']:,}",
        f"MACs per pixel: {r['macs_per_pixel']:,}",
        f"MACs at {r['width']}x{r['height']}: {r['macs'] / 1e9:.3f}G"
        f" (FLOPs at 2 per MAC: {r['flops_2x'] / 1e9:.3f}G; bias/BN/ReLU not counted)",
        f"DSC/standard cost ratio: {r['dsc_to_std_ratio']:.6f} (C_O=1: {r['dsc_to_std_ratio_single_output']:.6f})",
        f"padding-affected border: {r['border']} samples",
        "frame-level padding share:",
    ]
    for row in r["padding_frame"]:
        lines.append(f"  {row['width']:>5}x{row['height']:<5} {100 * row['share']:6.2f}%")
    lines.append("block-level padding share (exact / approx):")
    for row in r["padding_block"]:
        lines.append(f"  {row['size']:>4}x{row['size']:<4} {100 * row['exact']:6.2f}% / {100 * row['approx']:6.2f}%")
    return "\n".join(lines)
