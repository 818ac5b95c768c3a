"""The hybrid analog/digital (h-DJSCC) chain and its training procedures.

Source ``f_s`` -> wireless hop -> relay ``g_d`` + learned compressor ->
lossless backhaul -> destination decompressor. Also hosts the oblivious
relay, the two-user extension and the R-D analysis of JSCC outputs.
"""
from __future__ import annotations

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import compression as cmp
from .bitstream import Bitstream, quantize_eta_db
from .channels import (ChannelState, awgn, db_to_linear, linear_to_db, mmse_equalize,
                       precode_csit, sample_rayleigh, transmit)
from .config import ExperimentConfig
from .data import iterate_batches
from .errors import ConfigurationError, CorruptedStreamError, ShapeError, TrainingDivergenceError
from .jscc import JSCCConfig, JSCCDecoder, JSCCEncoder
from .metrics import psnr_per_image, ssim_per_image

log = logging.getLogger(__name__)


# --- model --------------------------------------------------------------------

def jscc_config(cfg: ExperimentConfig) -> JSCCConfig:
    return JSCCConfig(c_out=cfg.c_out, features=cfg.jscc_features, n_res_blocks=cfg.jscc_res_blocks,
                      n_rates=cfg.n_rates, rate_adaptive=cfg.rate_adaptive,
                      snr_adaptive=cfg.snr_adaptive, snr_range_db=tuple(cfg.jscc_snr_range_db))


def compressor_config(cfg: ExperimentConfig) -> cmp.CompressorConfig:
    return cmp.CompressorConfig(features=cfg.comp_features, c_z=cfg.c_z, c_v=cfg.c_v,
                                n_res_blocks=cfg.comp_res_blocks, n_rates=cfg.n_rates,
                                snr_range_db=cfg.eta_range_db, snr_adaptive=cfg.snr_adaptive)


class HDJSCC(nn.Module):
    """JSCC encoder/decoder for the access hop plus the relay compressor."""

    def __init__(self, cfg: ExperimentConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.f_s = JSCCEncoder(jscc_config(cfg))
        self.g_d = JSCCDecoder(jscc_config(cfg))
        self.compressor = cmp.Compressor(compressor_config(cfg))
        self._tables = None

    @property
    def image_size(self):
        return tuple(self.cfg.image_size)

    def channel_uses(self) -> int:
        return self.f_s.cfg.channel_uses(*self.image_size)

    def access_hop(self, s, eta, ell=1, h=None, generator=None, kind=None):
        """Encode, transmit and equalize. Returns ``(x, x_hat)``.

        With CSIT the encoder sees the effective SNR ``|h|^2 eta`` and the
        codeword is phase-precoded; without CSIT only the receiver uses ``h``.
        """
        kind = kind or self.cfg.channel
        if kind == "awgn":
            x = self.f_s(s, eta, ell)
            return x, awgn(x, eta, generator)
        if h is None:
            raise ValueError("fading channels need h")
        h = torch.as_tensor(h).to(torch.complex128 if s.dtype == torch.float64 else torch.complex64)
        if kind == "rayleigh_csit":
            eff = (h.abs().double() ** 2) * torch.as_tensor(eta, dtype=torch.float64)
            x = self.f_s(s, eff, ell)
            return x, transmit(precode_csit(x, h), eta, kind, h, generator)
        x = self.f_s(s, eta, ell)
        return x, transmit(x, eta, kind, h, generator)

    def relay_decode(self, x_hat, eta, ell=1):
        return self.g_d(x_hat, eta, ell, image_size=tuple(self.image_size))

    def forward(self, s, eta, ell=1, h=None, generator=None, mode: str = "noise", kind=None):
        x, x_hat = self.access_hop(s, eta, ell, h, generator, kind)
        s_tilde = self.relay_decode(x_hat, eta, ell)
        out = self.compressor(s_tilde, eta, ell, generator=generator, mode=mode)
        out.update(x=x, x_hat=x_hat, s_tilde=s_tilde)
        return out

    # coding tables for the hyper-latents; dropped whenever weights may change
    def invalidate_tables(self):
        self._tables = None

    def tables(self) -> np.ndarray:
        if self._tables is None:
            self._tables = self.compressor.prior.cdf_tables()
        return self._tables

    def set_tables(self, tables):
        self._tables = np.asarray(tables, dtype=np.int32)


def weights_digest(modules) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, t in sorted(m.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def init_from_pretrained(model: HDJSCC, pretrained, freeze: bool = True) -> HDJSCC:
    """Copy ``f_s``/``g_d`` weights from a pretrained model (or state dicts).

    Parameters absent from the source (e.g. rate gates added on top of an
    SNR-adaptive JSCC) keep their fresh initialization and stay trainable;
    copied ones are frozen when ``freeze`` is set.
    """
    if pretrained is None:
        raise ConfigurationError("pretrained JSCC weights are required for init='pretrained'")
    if isinstance(pretrained, nn.Module):
        sources = {"f_s": pretrained.f_s.state_dict(), "g_d": pretrained.g_d.state_dict()}
    else:
        sources = pretrained
    for key in ("f_s", "g_d"):
        target = getattr(model, key)
        own = target.state_dict()
        copied = {k: v for k, v in sources[key].items() if k in own and own[k].shape == v.shape}
        if not copied:
            raise ConfigurationError(f"pretrained {key} shares no parameters with the model")
        target.load_state_dict(copied, strict=False)
        if freeze:
            for name, p in target.named_parameters():
                if name in copied:
                    p.requires_grad_(False)
    model.invalidate_tables()
    return model


def trainable_parameters(module: nn.Module):
    return [p for p in module.parameters() if p.requires_grad]


# --- training -------------------------------------------------------------------

@dataclass
class StepStats:
    loss: float
    bpp: float
    mse: float
    lam: float = 0.0
    eta_db: float = 0.0


def _check_finite(loss, **context):
    if not torch.isfinite(loss):
        detail = ", ".join(f"{k}={v}" for k, v in context.items())
        raise TrainingDivergenceError(f"non-finite loss ({detail})")


def rd_loss(s, out, lam: float, height: int, width: int):
    """``lam * MSE + bpp`` with the MSE per element on the [0, 1] scale."""
    mse = torch.mean((s - out["s_hat"]) ** 2)
    bpp = cmp.estimate_bpp(out["lik_z"], out["lik_v"], height, width)
    return lam * mse + bpp, bpp, mse


def _optimize(loss, optimizer):
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()


def hdjscc_train_step(model: HDJSCC, s, eta, lam: float, ell=1, generator=None, h=None,
                      optimizer=None, mode: str = "noise") -> StepStats:
    """One training-quantized forward pass (and update when ``optimizer`` is given)."""
    out = model(s, eta, ell, h=h, generator=generator, mode=mode)
    loss, bpp, mse = rd_loss(s, out, lam, s.shape[-2], s.shape[-1])
    eta_db = float(linear_to_db(torch.as_tensor(eta, dtype=torch.float64)).mean())
    _check_finite(loss, lam=lam, eta_db=eta_db, bpp=bpp.item(), mse=mse.item())
    _optimize(loss, optimizer)
    model.invalidate_tables()
    return StepStats(loss.item(), bpp.item(), mse.item(), lam, eta_db)


def jscc_train_step(model: HDJSCC, s, eta, ell=1, generator=None, h=None, optimizer=None) -> StepStats:
    """Pretraining objective for the JSCC pair alone: MSE of ``g_d`` output."""
    _, x_hat = model.access_hop(s, eta, ell, h, generator)
    mse = torch.mean((s - model.relay_decode(x_hat, eta, ell)) ** 2)
    _check_finite(mse)
    _optimize(mse, optimizer)
    return StepStats(mse.item(), 0.0, mse.item())


@dataclass
class Conditions:
    ell: int
    lam: float
    eta: torch.Tensor
    h: torch.Tensor | None


def sample_conditions(cfg: ExperimentConfig, batch: int, generator: torch.Generator,
                      eta_range_db=None) -> Conditions:
    """Draw one rate index and one SNR (uniform in dB) per batch, and one
    fading coefficient per item when the channel fades.
    """
    lo, hi = eta_range_db or cfg.eta_range_db
    ell = int(torch.randint(1, cfg.n_rates + 1, (1,), generator=generator))
    eta_db = lo + (hi - lo) * float(torch.rand((), generator=generator, dtype=torch.float64))
    h = None
    if cfg.channel != "awgn":
        h = sample_rayleigh(generator, (batch,))
    return Conditions(ell, float(cfg.lambdas[ell - 1]), torch.tensor(db_to_linear(eta_db)), h)


@dataclass
class History:
    steps: list = field(default_factory=list)
    val: list = field(default_factory=list)
    lr: list = field(default_factory=list)


def _steps_per_epoch(cfg, n_train):
    return cfg.epoch_steps or max(n_train // cfg.batch_size, 1)


def _run(model, params, step_fn, val_fn, train_images, cfg: ExperimentConfig, generator,
         max_steps=None, start_step: int = 0, on_epoch=None) -> History:
    """Generic loop: Adam, plateau LR decay on the validation loss per epoch."""
    max_steps = cfg.max_steps if max_steps is None else max_steps
    if not params:
        raise ConfigurationError("no trainable parameters")
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(opt, factor=cfg.lr_factor, patience=cfg.lr_patience)
    rng = np.random.default_rng([cfg.seed, start_step])
    hist = History()
    per_epoch = _steps_per_epoch(cfg, len(train_images))
    step = start_step
    model.train()
    while step < max_steps:
        for s in iterate_batches(train_images, cfg.batch_size, rng):
            st = step_fn(s, generator, opt)
            hist.steps.append(st)
            step += 1
            if step % per_epoch == 0 or step == max_steps:
                model.eval()
                v = val_fn()
                model.train()
                sched.step(v)
                hist.val.append((step, v))
                hist.lr.append(opt.param_groups[0]["lr"])
                log.info("step %d loss %.4f val %.4f lr %.2e", step, st.loss, v, hist.lr[-1])
                if on_epoch is not None:
                    on_epoch(step, hist)
            if step >= max_steps:
                break
    model.eval()
    if isinstance(model, HDJSCC):
        model.invalidate_tables()
    return hist


def _val_batches(images, cfg):
    n = min(cfg.val_images, len(images))
    return list(iterate_batches(images[:n], min(cfg.batch_size, n), None, drop_last=False))


def train_jscc(model: HDJSCC, train_images, val_images, cfg: ExperimentConfig, max_steps=None,
               generator=None) -> History:
    """Pretrain the (SNR-adaptive) JSCC pair with SNR drawn from the JSCC range."""
    generator = generator or torch.Generator().manual_seed(cfg.seed)
    val = _val_batches(val_images, cfg)

    def step(s, gen, opt):
        c = sample_conditions(cfg, len(s), gen, cfg.jscc_snr_range_db)
        return jscc_train_step(model, s, c.eta, c.ell, gen, c.h, opt)

    def validate():
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        with torch.no_grad():
            return float(np.mean([jscc_train_step(model, s, c.eta, c.ell, gen, c.h).loss
                                  for s in val
                                  for c in [sample_conditions(cfg, len(s), gen, cfg.jscc_snr_range_db)]]))

    params = trainable_parameters(model.f_s) + trainable_parameters(model.g_d)
    return _run(model, params, step, validate, train_images, cfg, generator, max_steps)


def train_fully_adaptive(model: HDJSCC, train_images, val_images, cfg: ExperimentConfig,
                         pretrained=None, max_steps=None, generator=None, on_epoch=None) -> History:
    """Joint training over random (lambda, eta, h) draws.

    A single-lambda, single-SNR config reduces this to training one
    operating point; an AWGN config never draws ``h``.
    """
    if cfg.init == "pretrained":
        init_from_pretrained(model, pretrained, freeze=cfg.freeze_jscc)
    generator = generator or torch.Generator().manual_seed(cfg.seed)
    val = _val_batches(val_images, cfg)
    h_w = tuple(cfg.image_size)

    def step(s, gen, opt):
        c = sample_conditions(cfg, len(s), gen)
        return hdjscc_train_step(model, s, c.eta, c.lam, c.ell, gen, c.h, opt, cfg.train_quantization)

    def validate():
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        losses = []
        with torch.no_grad():
            for s in val:
                c = sample_conditions(cfg, len(s), gen)
                out = model(s, c.eta, c.ell, h=c.h, generator=gen, mode=cfg.train_quantization)
                losses.append(float(rd_loss(s, out, c.lam, *h_w)[0]))
        return float(np.mean(losses))

    return _run(model, trainable_parameters(model), step, validate, train_images, cfg, generator,
                max_steps, on_epoch=on_epoch)


# --- deployment -----------------------------------------------------------------

@dataclass
class RDPoint:
    bpp: float
    psnr: float
    ssim: float
    lam: float
    eta_db: float
    k_prime: float
    channel: str = "awgn"

    def as_row(self, **meta) -> dict:
        return {**meta, "lambda": self.lam, "eta_db": self.eta_db, "channel": self.channel,
                "bpp": self.bpp, "psnr_db": self.psnr, "ssim": self.ssim, "k_prime": self.k_prime}


def backhaul_latency(bits: float, r_n: float) -> int:
    """Channel uses needed on the backhaul: ``ceil(L_b / R_N)``."""
    if r_n <= 0:
        raise ValueError("r_n must be positive")
    return int(math.ceil(bits / r_n - 1e-9))


@dataclass
class DeployResult:
    bitstream: Bitstream
    s_hat: torch.Tensor
    s_tilde: torch.Tensor
    point: RDPoint
    estimated_bits: float

    @property
    def data(self) -> bytes:
        return self.bitstream.to_bytes()


@torch.no_grad()
def relay_compress(model: HDJSCC, s_tilde, eta_db: float, ell: int = 1):
    """Round, entropy-code and locally reconstruct one relay input (1, C, H, W).

    The SNR is taken through the container's f32 representation first so the
    destination conditions on exactly the same value.
    """
    if s_tilde.dim() != 4 or s_tilde.shape[0] != 1:
        raise ShapeError("relay_compress handles one image at a time")
    comp = model.compressor
    eta_db = quantize_eta_db(eta_db)
    eta = db_to_linear(eta_db)
    a, a_p, b, b_p = comp.scaling.select(ell)
    z = cmp.scale(comp.analyze(s_tilde, eta), a)
    v = cmp.scale(comp.hyper_analyze(z, eta), b)
    z_hat, v_hat = cmp.quantize_round(z), cmp.quantize_round(v)
    mu, sigma = comp.hyper_synthesize(cmp.rescale(v_hat, b_p), eta)
    b_v = cmp.encode_factorized(v_hat[0].numpy(), model.tables())
    b_z = cmp.encode_gaussian(z_hat[0].numpy(), mu[0].double().numpy(), sigma[0].double().numpy())
    s_hat = comp.synthesize(cmp.rescale(z_hat, a_p), eta)
    est = float(cmp.bits_per_item(cmp.likelihood_gaussian(z_hat, mu, sigma))
                + cmp.bits_per_item(comp.prior.likelihood(v_hat)))
    h, w = s_tilde.shape[-2:]
    return Bitstream(h, w, ell, eta_db, b_v, b_z), s_hat, est


@torch.no_grad()
def decompress(model: HDJSCC, data) -> torch.Tensor:
    """Destination side: rebuild the image from a container."""
    bs = data if isinstance(data, Bitstream) else Bitstream.from_bytes(data)
    comp = model.compressor
    eta = db_to_linear(bs.eta_db)
    _, a_p, _, b_p = comp.scaling.select(bs.lambda_index)
    f = comp.spatial_factor
    v_shape = (comp.cfg.c_v, bs.height // f, bs.width // f)
    v_hat = cmp.decode_factorized(bs.b_v, model.tables(), v_shape)
    dtype = next(comp.parameters()).dtype
    v_hat = torch.from_numpy(v_hat).to(dtype)[None]
    mu, sigma = comp.hyper_synthesize(cmp.rescale(v_hat, b_p), eta)
    z_hat = cmp.decode_gaussian(bs.b_z, mu[0].double().numpy(), sigma[0].double().numpy())
    z_hat = torch.from_numpy(z_hat.reshape(mu.shape[1:])).to(dtype)[None]
    return comp.synthesize(cmp.rescale(z_hat, a_p), eta)


@torch.no_grad()
def hdjscc_deploy(model: HDJSCC, s, state: ChannelState, ell: int | None = None, generator=None,
                  r_n: float | None = None, verify: bool = True) -> DeployResult:
    """Run the full chain on one image and produce the backhaul container.

    With ``verify`` the container is decoded again and compared against the
    relay's own reconstruction; any difference raises CorruptedStreamError.
    """
    model.eval()
    if s.dim() == 3:
        s = s[None]
    r_n = model.cfg.r_n if r_n is None else r_n
    ell = state.ell if ell is None else ell
    if state.csit:
        kind = "rayleigh_csit"
    elif model.cfg.channel == "awgn" and state.h == 1:
        kind = "awgn"
    else:
        kind = "rayleigh_csir"
    h = None if kind == "awgn" else torch.tensor([complex(state.h)])
    _, x_hat = model.access_hop(s, state.eta, ell, h, generator, kind)
    s_tilde = model.relay_decode(x_hat, state.eta, ell)
    bs, s_hat, est = relay_compress(model, s_tilde, linear_to_db(state.eta), ell)
    if verify and not torch.equal(decompress(model, bs.to_bytes()), s_hat):
        raise CorruptedStreamError("destination reconstruction differs from the relay prediction")
    bits = bs.payload_bits
    h_, w_ = s.shape[-2:]
    point = RDPoint(bpp=bits / (h_ * w_), psnr=float(psnr_per_image(s, s_hat)[0]),
                    ssim=float(ssim_per_image(s, s_hat)[0]), lam=float(model.cfg.lambdas[ell - 1]),
                    eta_db=float(linear_to_db(state.eta)), k_prime=backhaul_latency(bits, r_n), channel=kind)
    return DeployResult(bs, s_hat, s_tilde, point, est)


# --- evaluation -----------------------------------------------------------------

@torch.no_grad()
def evaluate(model: HDJSCC, images, eta_db: float, ell: int = 1, kind=None, seed: int = 0,
             batch_size: int = 100) -> RDPoint:
    """Mean PSNR/SSIM and estimated bpp (rounded latents) over ``images``."""
    model.eval()
    kind = kind or model.cfg.channel
    gen = torch.Generator().manual_seed(seed)
    eta = db_to_linear(eta_db)
    h_, w_ = model.image_size
    ps, ss, bits = [], [], []
    for s in iterate_batches(images, batch_size, None, drop_last=False):
        h = sample_rayleigh(gen, (len(s),)) if kind != "awgn" else None
        out = model(s, eta, ell, h=h, generator=gen, mode="round", kind=kind)
        ps.append(psnr_per_image(s, out["s_hat"]))
        ss.append(ssim_per_image(s, out["s_hat"]))
        bits.append((cmp.bits_per_item(out["lik_z"]) + cmp.bits_per_item(out["lik_v"])).numpy())
    bpp = float(np.mean(np.concatenate(bits))) / (h_ * w_)
    return RDPoint(bpp, float(np.mean(np.concatenate(ps))), float(np.mean(np.concatenate(ss))),
                   float(model.cfg.lambdas[ell - 1]), float(eta_db),
                   backhaul_latency(bpp * h_ * w_, model.cfg.r_n), kind)


@torch.no_grad()
def evaluate_jscc(model: HDJSCC, images, eta_db: float, ell: int = 1, kind=None, seed: int = 0,
                  batch_size: int = 100) -> float:
    """Mean PSNR of the relay-side JSCC reconstruction alone."""
    model.eval()
    kind = kind or model.cfg.channel
    gen = torch.Generator().manual_seed(seed)
    eta = db_to_linear(eta_db)
    ps = []
    for s in iterate_batches(images, batch_size, None, drop_last=False):
        h = sample_rayleigh(gen, (len(s),)) if kind != "awgn" else None
        _, x_hat = model.access_hop(s, eta, ell, h, gen, kind)
        ps.append(psnr_per_image(s, model.relay_decode(x_hat, eta, ell)))
    return float(np.mean(np.concatenate(ps)))


@torch.no_grad()
def encoder_outputs(model: HDJSCC, images, eta_db: float, ell: int = 1, batch_size: int = 100):
    """Stack of transmitted codewords ``f_s(S, eta, ell)`` for ``images``."""
    eta = db_to_linear(eta_db)
    return torch.cat([model.f_s(s, eta, ell) for s in iterate_batches(images, batch_size, None, drop_last=False)])


def evaluate_grid(model: HDJSCC, images, eta_dbs, ells=None, kinds=None, seed: int = 0):
    ells = ells or range(1, model.cfg.n_rates + 1)
    kinds = kinds or [model.cfg.channel]
    return [evaluate(model, images, e, l, k, seed) for k in kinds for l in ells for e in eta_dbs]


# --- oblivious relaying ---------------------------------------------------------

class ObliviousRelay(nn.Module):
    """Relay compressor that only ever sees the received complex signal.

    ``y1`` of length ``k`` is viewed as a real (C_out, H/4, W/4) tensor, the
    same geometry the JSCC decoder uses, and compressed with the hyperprior
    machinery without any image-domain output nonlinearity.
    """

    def __init__(self, c_out: int = 24, image_size=(32, 32), features: int = 192, c_z: int = 256,
                 c_v: int = 192, n_res_blocks: int = 1):
        super().__init__()
        self.c_out = c_out
        self.image_size = tuple(image_size)
        self.grid = (image_size[0] // 4, image_size[1] // 4)
        self.compressor = cmp.Compressor(cmp.CompressorConfig(
            in_channels=c_out, out_channels=c_out, features=features, c_z=c_z, c_v=c_v,
            main_downsamples=1, hyper_downsamples=2, n_res_blocks=n_res_blocks,
            image_output=False, snr_adaptive=False))

    def forward(self, y1, generator=None, mode: str = "noise"):
        if not torch.is_complex(y1):
            raise TypeError("the oblivious relay accepts only received complex signals")
        from .jscc import to_complex, to_real

        t = to_real(y1, (self.c_out, *self.grid))
        out = self.compressor(t, 1.0, 1, generator=generator, mode=mode)
        out["y_hat"] = to_complex(out["s_hat"])
        return out


def oblivious_train_step(relay: ObliviousRelay, y1, lam: float, generator=None, optimizer=None) -> StepStats:
    """``lam * mean |y1 - y1_hat|^2 + bpp`` on the received signal only."""
    out = relay(y1, generator, mode="noise")
    mse = torch.mean(torch.abs(y1 - out["y_hat"]) ** 2)
    bpp = cmp.estimate_bpp(out["lik_z"], out["lik_v"], *relay.image_size)
    loss = lam * mse + bpp
    _check_finite(loss, lam=lam)
    _optimize(loss, optimizer)
    return StepStats(loss.item(), bpp.item(), mse.item(), lam)


def train_oblivious(relay: ObliviousRelay, jscc: HDJSCC, train_images, lam: float, eta_db: float,
                    cfg: ExperimentConfig, max_steps=None, generator=None) -> History:
    """The frozen JSCC source only produces received signals for training."""
    generator = generator or torch.Generator().manual_seed(cfg.seed)
    eta = db_to_linear(eta_db)

    def step(s, gen, opt):
        with torch.no_grad():
            _, y1 = jscc.access_hop(s, eta, 1, None, gen, "awgn")
        return oblivious_train_step(relay, y1, lam, gen, opt)

    return _run(relay, list(relay.parameters()), step, lambda: 0.0, train_images, cfg, generator, max_steps)


@torch.no_grad()
def evaluate_oblivious(relay: ObliviousRelay, jscc: HDJSCC, images, lam: float, eta_db: float,
                       seed: int = 0, batch_size: int = 100) -> RDPoint:
    gen = torch.Generator().manual_seed(seed)
    eta = db_to_linear(eta_db)
    ps, ss, bits = [], [], []
    for s in iterate_batches(images, batch_size, None, drop_last=False):
        _, y1 = jscc.access_hop(s, eta, 1, None, gen, "awgn")
        out = relay(y1, mode="round")
        s_hat = jscc.relay_decode(out["y_hat"], eta, 1)
        ps.append(psnr_per_image(s, s_hat))
        ss.append(ssim_per_image(s, s_hat))
        bits.append((cmp.bits_per_item(out["lik_z"]) + cmp.bits_per_item(out["lik_v"])).numpy())
    hw = relay.image_size[0] * relay.image_size[1]
    bpp = float(np.mean(np.concatenate(bits))) / hw
    return RDPoint(bpp, float(np.mean(np.concatenate(ps))), float(np.mean(np.concatenate(ss))),
                   lam, eta_db, backhaul_latency(bpp * hw, jscc.cfg.r_n))


# --- two-user extension -----------------------------------------------------------

class TwoUserExtension(nn.Module):
    """Second wireless hop appended after the destination's decompressor.

    The first-stage modules are a frozen h-DJSCC model; the second-hop JSCC
    pair ``f_s_t``/``g_d_t`` starts as a copy of the first-hop pair and is the
    only trainable part. The second hop has noise variance ``1/eta2`` and,
    when faded, CSIR-only MMSE equalization.
    """

    def __init__(self, base: HDJSCC):
        super().__init__()
        self.base = base
        for p in base.parameters():
            p.requires_grad_(False)
        self.f_s_t = copy.deepcopy(base.f_s)
        self.g_d_t = copy.deepcopy(base.g_d)
        for p in list(self.f_s_t.parameters()) + list(self.g_d_t.parameters()):
            p.requires_grad_(True)

    def forward(self, s, eta1, eta2, h1=None, h2=None, generator=None, ell: int = 1):
        base = self.base
        with torch.no_grad():
            kind = "awgn" if h1 is None else "rayleigh_csir"
            _, x_hat = base.access_hop(s, eta1, ell, h1, generator, kind)
            s_tilde = base.relay_decode(x_hat, eta1, ell)
            s_t = base.compressor(s_tilde, eta1, ell, mode="round")["s_hat"]
        x_t = self.f_s_t(s_t, eta2, ell)
        if h2 is None:
            x_hat2 = awgn(x_t, eta2, generator)
        else:
            h2 = torch.as_tensor(h2).to(x_t.dtype)
            y2 = awgn(h2.reshape(-1, 1) * x_t if h2.dim() else h2 * x_t, eta2, generator)
            x_hat2 = mmse_equalize(y2, h2, eta2, csit=False)
        return self.g_d_t(x_hat2, eta2, ell, image_size=base.image_size)


def extended_two_user_forward(ext: TwoUserExtension, s, eta1, eta2, h1=None, h2=None, generator=None):
    return ext(s, eta1, eta2, h1, h2, generator)


def two_user_train_step(ext: TwoUserExtension, s, eta1, eta2, generator=None, optimizer=None) -> StepStats:
    mse = torch.mean((s - ext(s, eta1, eta2, generator=generator)) ** 2)
    _check_finite(mse)
    _optimize(mse, optimizer)
    return StepStats(mse.item(), 0.0, mse.item())


def train_two_user(ext: TwoUserExtension, train_images, cfg: ExperimentConfig, eta_dbs=(2.0, 4.0, 6.0, 8.0),
                   max_steps=None, generator=None) -> History:
    generator = generator or torch.Generator().manual_seed(cfg.seed)

    def step(s, gen, opt):
        i = int(torch.randint(len(eta_dbs), (1,), generator=gen))
        eta = db_to_linear(eta_dbs[i])
        return two_user_train_step(ext, s, eta, eta, gen, opt)

    params = list(ext.f_s_t.parameters()) + list(ext.g_d_t.parameters())
    return _run(ext, params, step, lambda: 0.0, train_images, cfg, generator, max_steps)


# --- R-D analysis of the JSCC output ----------------------------------------------------

def rd_analysis_of_jscc_output(jscc: HDJSCC, train_images, test_images, eta_dbs=(1.0, 5.0, 9.0),
                               lambdas=None, cfg: ExperimentConfig | None = None, max_steps=None):
    """Train one plain compressor per (eta, lambda) on the frozen JSCC output
    ``S_eta = g_d(f_s(S, eta) + w, eta)`` and report how well ``S_eta`` itself
    is compressed. Returns a list of RDPoint.
    """
    cfg = cfg or jscc.cfg
    lambdas = lambdas or cfg.lambdas
    points = []
    for eta_db in eta_dbs:
        eta = db_to_linear(eta_db)
        for lam in lambdas:
            comp = cmp.Compressor(cmp.CompressorConfig(features=cfg.comp_features, c_z=cfg.c_z, c_v=cfg.c_v,
                                                       n_res_blocks=cfg.comp_res_blocks, snr_adaptive=False))
            gen = torch.Generator().manual_seed(cfg.seed)

            def target(s, g):
                with torch.no_grad():
                    _, x_hat = jscc.access_hop(s, eta, 1, None, g, "awgn")
                    return jscc.relay_decode(x_hat, eta, 1)

            def step(s, g, opt):
                s_eta = target(s, g)
                out = comp(s_eta, eta, 1, generator=g, mode="noise")
                loss, bpp, mse = rd_loss(s_eta, out, lam, *s.shape[-2:])
                _check_finite(loss)
                _optimize(loss, opt)
                return StepStats(loss.item(), bpp.item(), mse.item(), lam, eta_db)

            _run(comp, list(comp.parameters()), step, lambda: 0.0, train_images, cfg, gen, max_steps)
            ps, bits = [], []
            g = torch.Generator().manual_seed(cfg.seed + 1)
            with torch.no_grad():
                for s in iterate_batches(test_images, 100, None, drop_last=False):
                    s_eta = target(s, g)
                    out = comp(s_eta, eta, 1, mode="round")
                    ps.append(psnr_per_image(s_eta, out["s_hat"]))
                    bits.append((cmp.bits_per_item(out["lik_z"]) + cmp.bits_per_item(out["lik_v"])).numpy())
            hw = s.shape[-2] * s.shape[-1]
            bpp = float(np.mean(np.concatenate(bits))) / hw
            points.append(RDPoint(bpp, float(np.mean(np.concatenate(ps))), float("nan"), lam, eta_db,
                                  backhaul_latency(bpp * hw, cfg.r_n)))
    return points
