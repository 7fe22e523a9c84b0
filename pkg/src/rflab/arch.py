"""One-line architecture strings.

Grammar (tokens joined by "-"):
    conv<F>x<K>[s<S>]   K x K conv with F filters, optional stride S;
                        a relu is implied after every conv
    pool<P>[avg]        P x P pool, max unless "avg"
    fc<U>               dense with U units; a relu is implied (hidden layer)
    out                 final dense sized to the class count, linear

Example: "conv24x3-pool3-fc16-fc8-out". The expanded layer list still has to
pass the architecture validator, so strings like "pool3-out" are rejected.
"""

import re

from . import nn

_CONV = re.compile(r"conv(\d+)x(\d+)(?:s(\d+))?$")
_POOL = re.compile(r"pool(\d+)(avg)?$")
_FC = re.compile(r"fc(\d+)$")


def parse_arch(text, n_classes, padding="same"):
    """Expand an arch string into a layer list (relus and head included)."""
    if n_classes < 2:
        raise nn.ArchitectureError("need at least 2 classes")
    layers = []
    tokens = text.split("-")
    for pos, tok in enumerate(tokens):
        if m := _CONV.match(tok):
            f, k, s = int(m.group(1)), int(m.group(2)), int(m.group(3) or 1)
            layers.append(nn.conv(f, k, stride=s, padding=padding))
            layers.append(nn.relu())
        elif m := _POOL.match(tok):
            layers.append(nn.pool(int(m.group(1)), "avg" if m.group(2) else "max"))
        elif m := _FC.match(tok):
            layers.append(nn.dense(int(m.group(1))))
            layers.append(nn.relu())
        elif tok == "out":
            if pos != len(tokens) - 1:
                raise nn.ArchitectureError(
                    "token %d: 'out' must be the last token" % pos)
            layers.append(nn.dense(n_classes))
        else:
            raise nn.ArchitectureError("token %d: cannot parse %r" % (pos, tok))
    if not tokens or tokens[-1] != "out":
        raise nn.ArchitectureError("arch string must end with 'out'")
    return layers


def build_from_string(text, input_side, labels, padding="same"):
    """Arch string -> validated ModelSpec for (2, side, side) inputs."""
    labels = tuple(labels)
    layers = parse_arch(text, len(labels), padding)
    return nn.build_model((2, input_side, input_side), layers, labels)
