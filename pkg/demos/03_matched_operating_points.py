"""Pair steering and LoRA operating points at matched content similarity and report the style gain."""

from steerlab.metrics import OperatingPoint, matched_operating_points

steering = [OperatingPoint("s=0.5", 0.9744, 0.0125), OperatingPoint("s=1.0", 0.9310, 0.0240),
            OperatingPoint("s=1.5", 0.8674, 0.0449)]
lora = [OperatingPoint("m=0.25", 0.9716, 0.0094), OperatingPoint("m=0.5", 0.9300, 0.0170),
        OperatingPoint("m=0.75", 0.8770, 0.0249)]

res = matched_operating_points(steering, lora, tol=0.01)
print(f"{'steering':>9} {'LoRA':>7} {'|dCLIP-I|':>10} {'style delta':>12} {'gain':>6}")
for p in res.pairs:
    print(f"{p.steering.label:>9} {p.baseline.label:>7} {p.abs_delta_clip_i:10.4f} {p.style_delta:+12.4f} "
          f"{p.gain_pct:+5.0f}%")

# a tolerance nobody meets yields an empty table plus a reason
print(matched_operating_points(steering, lora, tol=0.0).diagnostic)
