"""Attach a steering module to a small frozen UNet, train it on one style, and sweep its scale.

The backbone here is untrained (its output head is randomised so the forward
pass is not identically zero); the point is the adapter mechanics: exact
equivalence at scale 0 and a residual that grows with the scale.
"""

import numpy as np

from steerlab.autodiff import no_grad
from steerlab.autodiff.checkpoint import digest
from steerlab.data import CorpusConfig, build_corpus
from steerlab.diffusion import SamplerConfig, make_linear_schedule, sample
from steerlab.steering import SteeringConfig, SteeringModule, count_params, verify_zero_equivalence
from steerlab.training import TrainConfig, train_on_style
from steerlab.unet import UNetConfig, build_unet

ucfg = UNetConfig(image_size=8, base_channels=8, groups=4, cond_dim=8, time_dim=16)
model, descs = build_unet(ucfg, np.random.default_rng(0))
head = model.out_conv.weight
head.data = (0.1 * np.random.default_rng(1).standard_normal(head.shape)).astype(head.dtype)
model.freeze()
frozen = digest(model.state_dict())

steer = SteeringModule(SteeringConfig(k=4), descs, ucfg.cond_dim, ucfg.groups, np.random.default_rng(2))
n, frac = count_params(steer, model)
print(f"steering module: {n} trainable parameters, {100 * frac:.2f}% of the backbone")

corpus = build_corpus(CorpusConfig(image_size=8, pretrain=8, style_train=32, style_ref=4, feat_train=8, eval=8), seed=0)
split = corpus["style_train"]
cond = np.random.default_rng(3).standard_normal((len(split), ucfg.cond_dim)).astype(np.float32)
sched = make_linear_schedule()

x = split.images[:4]
t = np.array([100, 300, 600, 900])
print("fresh module, |steered - base| at s=1:", verify_zero_equivalence(model, steer, x, t, cond[:4], 1.0))

log = train_on_style(model.denoise_fn([steer.at(1.0)]), steer.trainable_parameters(), split, cond, sched,
                     TrainConfig(steps=60, batch=4, lr=3e-3), np.random.default_rng(4))
print(f"loss {log.summary()['first_decile_loss']:.4f} -> {log.summary()['last_decile_loss']:.4f}")
print("backbone untouched:", digest(model.state_dict()) == frozen)

z = np.random.default_rng(5).standard_normal((4, 8, 8, 3)).astype(np.float32)
sampler = SamplerConfig(steps=10, guidance_scale=3.0)
uncond = np.zeros(ucfg.cond_dim, np.float32)
with no_grad():
    base, _ = sample(model.denoise_fn(), cond[:4], sampler, z, sched, uncond=uncond)
    for s in (0.0, 0.5, 1.0, 1.5):
        out, _ = sample(model.denoise_fn([steer.at(s)]), cond[:4], sampler, z, sched, uncond=uncond)
        print(f"s={s:<4} mean |x - x_base| = {np.mean(np.abs(out - base)):.5f}")
