"""Synthesized I/Q datasets: PSK/QAM modulation recognition and OFDM
FFT-size recognition.

Frames are complex baseband at unit average power before impairments. Bit
streams are packet-structured (a fixed 32-bit sync word every PAYLOAD_BITS
random bits), which is what makes plain DQPSK separable from QPSK: both live
on the same 4-point grid, but repeated sync words give QPSK repeating symbol
patterns while DQPSK's absolute symbols drift with the accumulated payload
phase. Every frame derives its own generator from (master seed, class,
frame), so parallel and serial generation agree bit for bit.
"""

from dataclasses import dataclass

import numpy as np

from .trainer import Dataset

SCHEMES = ("bpsk", "qpsk", "8psk", "16qam", "dqpsk")
OFDM_SIZES = (64, 128, 256)
BITS_PER_SYMBOL = {"bpsk": 1, "qpsk": 2, "8psk": 3, "16qam": 4, "dqpsk": 2}

RRC_BETA = 0.35
RRC_SPAN = 10
DEFAULT_SPS = 4

SYNC_WORD = 0xD391B5C7
SYNC_BITS = np.array([(SYNC_WORD >> (31 - i)) & 1 for i in range(32)], dtype=np.uint8)
PAYLOAD_BITS = 96


@dataclass
class IQFrame:
    samples: np.ndarray
    sps: int
    snr_db: float = None
    label: str = ""


@dataclass
class ChannelConfig:
    """AWGN at an exact power ratio, plus optional static phase and CFO.

    carrier_phase_offset None means a fresh uniform draw per frame;
    frequency_offset is in cycles per sample; snr_db None or +inf disables
    noise.
    """
    snr_db: float = 10.0
    carrier_phase_offset: float = None
    frequency_offset: float = None
    seed: int = None


def _gray_positions(n_bits):
    # position p on the constellation gets bit pattern p ^ (p >> 1)
    size = 1 << n_bits
    lut = np.empty(size, dtype=np.int64)
    for p in range(size):
        lut[p ^ (p >> 1)] = p
    return lut


_QPSK_POS = _gray_positions(2)
_8PSK_POS = _gray_positions(3)
_QAM_POS = _gray_positions(2)  # per-axis level index


def _bits_to_ints(bits, k):
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1, k)
    return bits @ (1 << np.arange(k - 1, -1, -1, dtype=np.int64))


def symbols_from_bits(bits, scheme):
    """Map a bit array to unit-average-power constellation symbols."""
    bits = np.asarray(bits, dtype=np.uint8)
    if scheme not in SCHEMES:
        raise ValueError("unknown scheme %r" % (scheme,))
    k = BITS_PER_SYMBOL[scheme]
    if bits.size % k:
        raise ValueError("bit count %d not divisible by %d bits/symbol"
                         % (bits.size, k))
    if scheme == "bpsk":
        return np.where(bits == 0, 1.0, -1.0).astype(np.complex128)
    idx = _bits_to_ints(bits, k)
    if scheme == "qpsk":
        pos = _QPSK_POS[idx]
        return np.exp(1j * (np.pi / 4 + pos * np.pi / 2))
    if scheme == "8psk":
        pos = _8PSK_POS[idx]
        return np.exp(1j * (pos * np.pi / 4))
    if scheme == "16qam":
        levels = np.array([-3.0, -1.0, 1.0, 3.0])
        i_lev = levels[_QAM_POS[idx >> 2]]
        q_lev = levels[_QAM_POS[idx & 3]]
        return (i_lev + 1j * q_lev) / np.sqrt(10.0)
    # dqpsk: Gray-coded phase increments on the QPSK grid, reference pi/4
    pos = _QPSK_POS[idx]
    phase = np.pi / 4 + np.cumsum(pos * np.pi / 2)
    return np.exp(1j * phase)


def rrc_taps(sps, span=RRC_SPAN, beta=RRC_BETA):
    """Unit-energy root-raised-cosine filter, span symbols each side total."""
    n = span * sps
    tau = (np.arange(n + 1) - n / 2) / sps
    taps = np.empty(tau.shape)
    tiny = 1e-9
    at_zero = np.abs(tau) < tiny
    at_pole = np.abs(np.abs(tau) - 1.0 / (4 * beta)) < tiny
    rest = ~(at_zero | at_pole)
    taps[at_zero] = 1.0 - beta + 4 * beta / np.pi
    taps[at_pole] = (beta / np.sqrt(2)) * (
        (1 + 2 / np.pi) * np.sin(np.pi / (4 * beta))
        + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta)))
    t = tau[rest]
    taps[rest] = (np.sin(np.pi * t * (1 - beta))
                  + 4 * beta * t * np.cos(np.pi * t * (1 + beta))) / (
                      np.pi * t * (1 - (4 * beta * t) ** 2))
    return taps / np.sqrt(np.sum(taps ** 2))


def modulate(bits, scheme, sps=DEFAULT_SPS):
    """Pulse-shaped unit-power frame from a bit stream."""
    sym = symbols_from_bits(bits, scheme)
    up = np.zeros(sym.size * sps, dtype=np.complex128)
    up[::sps] = sym
    shaped = np.convolve(up, rrc_taps(sps))
    shaped /= np.sqrt(np.mean(np.abs(shaped) ** 2))
    return IQFrame(shaped, sps, None, scheme)


def make_packet_bits(rng, n_bits, payload_bits=PAYLOAD_BITS):
    """Sync word + random payload, repeated; ~25% structured at the default."""
    chunks = []
    total = 0
    while total < n_bits:
        chunks.append(SYNC_BITS)
        chunks.append(rng.integers(0, 2, size=payload_bits, dtype=np.uint8))
        total += SYNC_BITS.size + payload_bits
    return np.concatenate(chunks)[:n_bits]


def apply_channel(frame, cfg, rng=None):
    """Phase rotation, optional CFO, then complex AWGN at the exact SNR."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    s = frame.samples.astype(np.complex128)
    phase = cfg.carrier_phase_offset
    if phase is None:
        phase = rng.uniform(0.0, 2 * np.pi)
    if phase:
        s = s * np.exp(1j * phase)
    if cfg.frequency_offset:
        s = s * np.exp(2j * np.pi * cfg.frequency_offset * np.arange(s.size))
    if cfg.snr_db is not None and np.isfinite(cfg.snr_db):
        p_sig = np.mean(np.abs(s) ** 2)
        p_noise = p_sig / 10.0 ** (cfg.snr_db / 10.0)
        raw = rng.standard_normal(s.size) + 1j * rng.standard_normal(s.size)
        raw *= np.sqrt(p_noise / np.mean(np.abs(raw) ** 2))
        s = s + raw
    return IQFrame(s, frame.sps, cfg.snr_db, frame.label)


def measure_snr(clean, noisy):
    """Power-ratio SNR estimate in dB from a clean/noisy sample pair."""
    noise = np.asarray(noisy) - np.asarray(clean)
    return 10.0 * np.log10(np.mean(np.abs(clean) ** 2)
                           / np.mean(np.abs(noise) ** 2))


def ofdm_symbol(fft_size, loads):
    """One OFDM symbol (cyclic prefix + body) with {subcarrier: value} loads."""
    spec = np.zeros(fft_size, dtype=np.complex128)
    for k, v in loads.items():
        spec[k % fft_size] = v
    body = np.fft.ifft(spec) * fft_size
    cp = fft_size // 8
    return np.concatenate([body[-cp:], body])


def gen_ofdm(fft_size, n_symbols, cfg=None, rng=None):
    """QPSK-loaded OFDM frame; occupied subcarriers are +-1..+-0.4*fft_size."""
    if fft_size not in OFDM_SIZES:
        raise ValueError("fft_size must be one of %s" % (OFDM_SIZES,))
    if rng is None:
        rng = np.random.default_rng(cfg.seed if cfg is not None else None)
    k_max = int(0.8 * fft_size / 2)
    carriers = np.concatenate([np.arange(1, k_max + 1),
                               fft_size - np.arange(1, k_max + 1)])
    pieces = []
    for _ in range(n_symbols):
        data = symbols_from_bits(rng.integers(0, 2, size=2 * carriers.size,
                                              dtype=np.uint8), "qpsk")
        pieces.append(ofdm_symbol(fft_size, dict(zip(carriers, data))))
    s = np.concatenate(pieces)
    s /= np.sqrt(np.mean(np.abs(s) ** 2))
    return IQFrame(s, 1, None, "ofdm%d" % fft_size)


def frame_to_tensor(frame, l):
    """First l*l samples as planes (2, l, l): I then Q, max-abs normalized."""
    s = frame.samples
    if s.size < l * l:
        raise ValueError("frame has %d samples; need %d" % (s.size, l * l))
    s = s[:l * l]
    planes = np.stack([s.real.reshape(l, l), s.imag.reshape(l, l)])
    norm = np.max(np.abs(planes))
    return (planes / (norm if norm > 0 else 1.0)).astype(np.float32)


def _gen_frame(name, l, cfg, rng, sps, payload_bits):
    if name.startswith("ofdm"):
        fft_size = int(name[4:])
        per_sym = fft_size + fft_size // 8
        frame = gen_ofdm(fft_size, -(-(l * l) // per_sym), rng=rng)
    else:
        n_sym = -(-(l * l) // sps)
        bits = make_packet_bits(rng, n_sym * BITS_PER_SYMBOL[name], payload_bits)
        frame = modulate(bits, name, sps)
    frame.label = name
    return frame_to_tensor(apply_channel(frame, cfg, rng=rng), l)


def gen_dataset(classes, frames_per_class, l, cfg=None, master_seed=0,
                sps=DEFAULT_SPS, payload_bits=PAYLOAD_BITS):
    """Balanced, shuffled, fully seeded dataset of (2, l, l) frame tensors."""
    classes = tuple(classes)
    if len(classes) < 2:
        raise ValueError("need at least 2 classes")
    for name in classes:
        if name not in SCHEMES and not (name.startswith("ofdm")
                                        and name[4:].isdigit()
                                        and int(name[4:]) in OFDM_SIZES):
            raise ValueError("unknown class %r" % (name,))
    if cfg is None:
        cfg = ChannelConfig()
    n = len(classes) * frames_per_class
    x = np.empty((n, 2, l, l), dtype=np.float32)
    y = np.empty(n, dtype=np.int64)
    pos = 0
    for ci, name in enumerate(classes):
        for fi in range(frames_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([master_seed, ci, fi]))
            x[pos] = _gen_frame(name, l, cfg, rng, sps, payload_bits)
            y[pos] = ci
            pos += 1
    perm = np.random.default_rng([master_seed, 9]).permutation(n)
    return Dataset(x[perm], y[perm], classes, split_seed=master_seed)


def demodulate(frame, scheme, n_symbols):
    """Matched-filter minimum-distance demodulator; returns recovered bits.

    Independent check on the modulators: no trained model involved. Assumes
    the default pulse shaping and no phase offset (DQPSK tolerates phase).
    """
    taps = rrc_taps(frame.sps)
    mf = np.convolve(frame.samples, taps)
    idx = np.arange(n_symbols) * frame.sps + (taps.size - 1)
    z = mf[idx]
    z = z / np.sqrt(np.mean(np.abs(z) ** 2))
    k = BITS_PER_SYMBOL[scheme]
    if scheme == "dqpsk":
        prev = np.concatenate([[np.exp(1j * np.pi / 4)], z[:-1]])
        inc = np.angle(z * np.conj(prev))
        pos = np.round(inc / (np.pi / 2)).astype(np.int64) % 4
        sym_bits = pos ^ (pos >> 1)
    else:
        ref_bits = np.arange(1 << k, dtype=np.uint8)
        ref = symbols_from_bits(np.stack([(ref_bits >> (k - 1 - i)) & 1
                                          for i in range(k)], axis=1).ravel(),
                                scheme)
        sym_bits = np.argmin(np.abs(z[:, None] - ref[None, :]), axis=1)
    out = np.zeros((n_symbols, k), dtype=np.uint8)
    for i in range(k):
        out[:, i] = (sym_bits >> (k - 1 - i)) & 1
    return out.ravel()
