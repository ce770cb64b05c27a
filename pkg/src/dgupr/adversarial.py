"""Generator, U-Net projector, timestep-conditioned discriminator, and the
adversarial loss terms.

Label convention follows the discriminator objective as written: generated
samples carry label 1, references label 0, and the generator drives the
discriminator's output toward 0.  One weight-shared discriminator with a
learned timestep embedding realises the whole family of noise-level
discriminators; t = 0 on undiffused input is the original one.  A config
flag swaps in a small bank of independent per-t discriminators instead.

The gradient penalty differentiates the discriminator w.r.t. a random
convex mix of a (projected, diffused) real/fake pair, cut down to the
shorter length; the inner gradient is built with create_graph so the
penalty trains the discriminator like any other term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import DiffusionSchedule, diffuse
from .engine import (
    ContractError,
    Node,
    active_tape,
    add,
    backward,
    bce,
    clamp,
    conv1d_flat,
    gather_rows,
    leaf,
    leaky_relu,
    log,
    matmul,
    mean_all,
    mean_rows,
    mul,
    neg,
    sigmoid,
    slice_rows,
    smul,
    softmax_rows,
    sqrt_eps,
    square,
    sub,
    sum_all,
    val,
)
from .params import ParamStore

GP_NORM_EPS = 1e-12


@dataclass
class GanNets:
    gen_store: ParamStore
    disc_store: ParamStore
    v: int  # phoneme inventory size, SIL included
    d_pca: int
    gen_kernel: int
    use_unet: bool
    unet_down: tuple[int, ...]
    unet_up: tuple[int, ...]
    unet_kernel: int
    disc_width: int
    disc_kernel: int
    t_max: int
    lrelu: float
    disc_bank: bool = False

    @property
    def disc_in_width(self) -> int:
        return self.unet_up[-1] if self.use_unet else self.v


@dataclass
class GanLossTerms:
    g_bce: float = 0.0
    l_pd: float = 0.0
    l_sp: float = 0.0
    d_real_bce: float = 0.0
    d_fake_bce: float = 0.0
    l_gp: float = 0.0
    eta: float = 0.0
    gamma: float = 0.0
    lam: float = 0.0


def build_nets(cfg, v: int, d_pca: int, rng, dtype=np.float64) -> GanNets:
    """cfg is a TrainConfig; builds both stores with fresh parameters."""
    nets = GanNets(
        gen_store=ParamStore(dtype=np.dtype(dtype)),
        disc_store=ParamStore(dtype=np.dtype(dtype)),
        v=v,
        d_pca=d_pca,
        gen_kernel=cfg.gen_kernel,
        use_unet=cfg.use_unet,
        unet_down=tuple(cfg.unet_down),
        unet_up=tuple(cfg.unet_up),
        unet_kernel=cfg.unet_kernel,
        disc_width=cfg.disc_width,
        disc_kernel=cfg.disc_kernel,
        t_max=cfg.t_max,
        lrelu=cfg.lrelu,
        disc_bank=cfg.disc_bank,
    )
    if nets.disc_bank and nets.t_max > 16:
        raise ValueError("independent discriminator banks need a small t_max (<= 16)")
    init_generator(nets.gen_store, rng, d_pca, v, nets.gen_kernel)
    if nets.use_unet:
        init_unet(nets.disc_store, rng, v, nets.unet_down, nets.unet_up, nets.unet_kernel)
    init_discriminator(
        nets.disc_store,
        rng,
        nets.disc_in_width,
        nets.disc_width,
        nets.disc_kernel,
        nets.t_max,
        bank=nets.disc_bank,
    )
    return nets


def init_generator(store: ParamStore, rng, d_pca: int, v: int, k: int) -> None:
    store.add("gen.conv_w", rng.normal(0.0, 1.0 / math.sqrt(k * d_pca), (k * d_pca, v)))
    store.add("gen.conv_b", np.zeros((1, v)))


def init_unet(store: ParamStore, rng, v: int, down: tuple, up: tuple, k: int) -> None:
    w0, w1, w2, w3 = down
    store.add("unet.in_w", rng.normal(0.0, 1.0 / math.sqrt(v), (v, w0)))
    store.add("unet.in_b", np.zeros((1, w0)))
    for name, cin, cout in (
        ("down1", w0, w1),
        ("down2", w1, w2),
        ("down3", w2, w3),
        ("up1", up[0], up[0]),
        ("up2", up[0], up[1]),
    ):
        store.add(f"unet.{name}_w", rng.normal(0.0, 1.0 / math.sqrt(k * cin), (k * cin, cout)))
        store.add(f"unet.{name}_b", np.zeros((1, cout)))


def init_discriminator(store: ParamStore, rng, in_width: int, width: int, k: int, t_max: int, bank: bool = False) -> None:
    def one(prefix: str) -> None:
        store.add(prefix + "c1_w", rng.normal(0.0, 1.0 / math.sqrt(k * in_width), (k * in_width, width)))
        store.add(prefix + "c1_b", np.zeros((1, width)))
        store.add(prefix + "c2_w", rng.normal(0.0, 1.0 / math.sqrt(k * width), (k * width, width)))
        store.add(prefix + "c2_b", np.zeros((1, width)))
        # zero head: every discriminator starts undecided at 0.5
        store.add(prefix + "c3_w", np.zeros((k * width, 1)))
        store.add(prefix + "c3_b", np.zeros((1, 1)))

    if bank:
        for t in range(t_max + 1):
            one(f"disc.t{t}.")
    else:
        one("disc.")
        store.add("disc.temb", rng.normal(0.0, 0.02, (t_max + 1, width)))


# --------------------------------------------------------------------------
# forwards


def generate(nets: GanNets, w, segments):
    """Segment rows -> phoneme distribution rows (softmax over V)."""
    if val(segments).shape[0] < 1:
        raise ValueError("empty segment sequence")
    return softmax_rows(conv1d_flat(segments, w["gen.conv_w"], w["gen.conv_b"], nets.gen_kernel))


def unet_project(nets: GanNets, w, x):
    """V-width simplex rows -> low-width features, length preserved."""
    k, slope = nets.unet_kernel, nets.lrelu
    h0 = leaky_relu(add(matmul(x, w["unet.in_w"]), w["unet.in_b"]), slope)
    d1 = leaky_relu(conv1d_flat(h0, w["unet.down1_w"], w["unet.down1_b"], k), slope)
    d2 = leaky_relu(conv1d_flat(d1, w["unet.down2_w"], w["unet.down2_b"], k), slope)
    d3 = leaky_relu(conv1d_flat(d2, w["unet.down3_w"], w["unet.down3_b"], k), slope)
    u1 = add(leaky_relu(conv1d_flat(d3, w["unet.up1_w"], w["unet.up1_b"], k), slope), d3)
    u2 = add(leaky_relu(conv1d_flat(u1, w["unet.up2_w"], w["unet.up2_b"], k), slope), d2)
    return u2


def project(nets: GanNets, w, x):
    return unet_project(nets, w, x) if nets.use_unet else x


def disc_score(nets: GanNets, w, y, t: int):
    """Pre-sigmoid score: mean-pooled scalar head over positions."""
    if not (0 <= t <= nets.t_max):
        raise ValueError(f"timestep {t} outside the discriminator table [0, {nets.t_max}]")
    k, slope = nets.disc_kernel, nets.lrelu
    pre = f"disc.t{t}." if nets.disc_bank else "disc."
    h = conv1d_flat(y, w[pre + "c1_w"], w[pre + "c1_b"], k)
    if not nets.disc_bank:
        h = add(h, gather_rows(w["disc.temb"], [t]))
    h = leaky_relu(h, slope)
    h = leaky_relu(conv1d_flat(h, w[pre + "c2_w"], w[pre + "c2_b"], k), slope)
    s = conv1d_flat(h, w[pre + "c3_w"], w[pre + "c3_b"], k)
    return mean_all(s)


def discriminate(nets: GanNets, w, y, t: int):
    return sigmoid(disc_score(nets, w, y, t))


# --------------------------------------------------------------------------
# loss terms


def _mean_chain(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return smul(acc, 1.0 / len(terms))


def phoneme_diversity(batch_outputs):
    """Mean over the batch of minus the entropy of each sequence's
    position-averaged distribution."""
    if not batch_outputs:
        raise ValueError("empty batch")
    terms = []
    for p in batch_outputs:
        pbar = mean_rows(p)
        plogp = mul(pbar, log(clamp(pbar, 1e-12, 1.0)))
        terms.append(sum_all(plogp))  # -H
    return _mean_chain(terms)


def smoothness_penalty(output):
    """Sum over adjacent row pairs of squared euclidean distance."""
    n = val(output).shape[0]
    if n < 1:
        raise ValueError("empty output")
    d = sub(slice_rows(output, 1, n), slice_rows(output, 0, n - 1))
    return sum_all(square(d))


def gradient_penalty(nets: GanNets, w, real, fake, t: int, rng, score_fn=None):
    """(||grad_y C(y~, t)|| - 1)^2 at y~ = alpha*real + (1-alpha)*fake,
    both cut down to the shorter length first."""
    rl = val(real).shape[0]
    fl = val(fake).shape[0]
    n = min(rl, fl)
    if n == 0:
        raise ValueError("zero-length overlap between real and fake")
    r = slice_rows(real, 0, n) if rl > n else real
    f = slice_rows(fake, 0, n) if fl > n else fake
    alpha = float(rng.uniform())
    mix = add(smul(r, alpha), smul(f, 1.0 - alpha))
    if not isinstance(mix, Node):
        mix = leaf(val(mix))
    tp = active_tape()
    if tp is None:
        raise ContractError("gradient_penalty must run under an active tape")
    c = score_fn(mix) if score_fn is not None else discriminate(nets, w, mix, t)
    g = backward(tp, c, [mix], create_graph=True, stop_at=[mix])[0]
    norm = sqrt_eps(sum_all(square(g)), GP_NORM_EPS)
    return square(sub(norm, 1.0))


def loss_generator(nets: GanNets, w, batch, schedule: DiffusionSchedule, eta: float, gamma: float, rng):
    """batch: list of (segments, t).  BCE drives the discriminator toward
    the reference label on diffused generated samples; diversity and
    smoothness are computed on the undiffused outputs."""
    bces = []
    outputs = []
    sps = []
    for segments, t in batch:
        p = generate(nets, w, segments)
        y = diffuse(project(nets, w, p), int(t), schedule, rng)
        bces.append(bce(discriminate(nets, w, y, int(t)), 0.0))
        outputs.append(p)
        sps.append(smoothness_penalty(p))
    g_bce = _mean_chain(bces)
    l_pd = phoneme_diversity(outputs)
    l_sp = _mean_chain(sps)
    total = add(add(g_bce, smul(l_pd, eta)), smul(l_sp, gamma))
    terms = GanLossTerms(
        g_bce=float(val(g_bce)),
        l_pd=float(val(l_pd)),
        l_sp=float(val(l_sp)),
        eta=eta,
        gamma=gamma,
    )
    return total, terms


def loss_discriminator(nets: GanNets, w, batch, schedule: DiffusionSchedule, lam: float, rng):
    """batch: list of (segments, reference_dense, t).  Generated samples
    carry label 1 and references label 0; both sides run through the same
    projection and diffusion before the discriminator sees them.

    Per element the rng is consumed in a fixed order: diffusion noise for
    the fake side, diffusion noise for the real side, then the penalty's
    mixing weight.  Returns the real-branch discriminator outputs as plain
    floats for the horizon controller.
    """
    fake_terms = []
    real_terms = []
    gp_terms = []
    real_outputs = []
    for segments, ref_dense, t in batch:
        t = int(t)
        p = generate(nets, w, segments)
        fproj = project(nets, w, p)
        rproj = project(nets, w, ref_dense)
        fd = diffuse(fproj, t, schedule, rng)
        rd = diffuse(rproj, t, schedule, rng)
        cf = discriminate(nets, w, fd, t)
        cr = discriminate(nets, w, rd, t)
        fake_terms.append(bce(cf, 1.0))
        real_terms.append(bce(cr, 0.0))
        real_outputs.append(float(val(cr)))
        if lam > 0:
            gp_terms.append(gradient_penalty(nets, w, rd, fd, t, rng))
    d_fake = _mean_chain(fake_terms)
    d_real = _mean_chain(real_terms)
    total = add(d_fake, d_real)
    l_gp_val = 0.0
    if gp_terms:
        l_gp = _mean_chain(gp_terms)
        total = add(total, smul(l_gp, lam))
        l_gp_val = float(val(l_gp))
    terms = GanLossTerms(
        d_fake_bce=float(val(d_fake)),
        d_real_bce=float(val(d_real)),
        l_gp=l_gp_val,
        lam=lam,
    )
    return total, terms, real_outputs
