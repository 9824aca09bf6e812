"""
Discriminator receptive fields
==============================

A discriminator output score "sees" a square window of the input. The
recurrence rf += (k - 1) * jump; jump *= stride gives its width. Here we print
it for the four built discriminators and for a uniform stack of 3x3 stride-2
convs, which cannot produce a 1- or 16-pixel patch.
"""

from lunggan.models import LayerSpec, build_discriminator, receptive_field

for kind in ("D1", "D2", "D3", "D4"):
    d = build_discriminator(kind, 256, base_channels=8)
    convs = ", ".join(f"{s.kernel_hw[0]}/{s.stride}" for s in d.conv_layers())
    print(f"{kind}: rf={d.receptive_field():4d}  convs(k/s)=[{convs}]  params={d.param_count()}")

# the same recurrence, step by step, for five 3x3 stride-2 convs
rf, jump = 1, 1
for i in range(5):
    rf += (3 - 1) * jump
    jump *= 2
    print(f"after conv {i + 1}: rf={rf}")
assert rf == receptive_field([LayerSpec("conv", kernel=3, stride=2)] * 5)

# the literal build mode keeps 3x3/2 convs and reports what they really cover
for kind in ("D1", "D2", "D3"):
    d = build_discriminator(kind, 256, base_channels=8, mode="paper-literal")
    print(f"{kind} uniform 3x3/2 layout: rf={d.receptive_field()}")

# layer-by-layer view of D3
print(build_discriminator("D3", 256, base_channels=8).summary())
