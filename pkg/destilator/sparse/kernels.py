"""
Podmnogoterna redka konvolucija: računamo le na vidnih položajih, zakriti
položaji ostanejo 0 in vzorec maske se ohrani na vseh skalah.
"""
from dataclasses import dataclass, field

import numpy as np
from tensors import ops
from tensors.autodiff import Tensor, no_grad


class SparseError(ValueError):
    pass


@dataclass(eq=False)
class SparseFeatureMap:
    features: Tensor
    mask: np.ndarray
    scale: int = 1

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        features_shape = self.features.shape
        if len(features_shape) != 4 or self.mask.shape != (
            features_shape[0],
        ) + features_shape[2:]:
            raise SparseError(
                f"mask {self.mask.shape} does not match features {features_shape}"
            )

    @property
    def weights(self):
        return self.mask[:, None].astype(np.float64)

    @property
    def channels(self):
        return self.features.shape[1]

    def leaked(self):
        """Zakriti položaji, kjer je kateri koli kanal neničeln."""
        return np.any(self.features.data != 0, axis=1) & ~self.mask

    def assert_canonical(self):
        count = int(self.leaked().sum())
        if count:
            raise SparseError(f"{count} masked positions hold non-zero features")
        return self


def from_dense(image, visible, scale=1):
    """Zakrije sliko in jo zapakira v redki zemljevid značilk."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    weights = np.asarray(visible, dtype=np.float64)[:, None]
    return SparseFeatureMap(image * weights, visible, scale)


@ops.register("sparse_conv2d")
def gather_conv2d(x, weight, bias, in_mask, out_mask, stride=1, padding=0):
    """
    Konvolucija, izračunana le na vidnih izhodnih položajih. Okna zberemo samo
    za te položaje, zakriti vhodi prispevajo 0.
    """
    ops.check_conv_shapes("sparse_conv2d", x, weight, bias, stride)
    batch, channels, height, width = x.shape
    out_channels, _, kernel_h, kernel_w = weight.shape
    out_h = ops.conv_output_size(height, kernel_h, stride, padding)
    out_w = ops.conv_output_size(width, kernel_w, stride, padding)
    if out_mask.shape != (batch, out_h, out_w):
        raise SparseError(
            f"sparse_conv2d: output mask {out_mask.shape} does not match output"
            f" grid {(batch, out_h, out_w)}"
        )
    in_weights = in_mask[:, None].astype(np.float64)
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    x_padded = np.pad(x.data * in_weights, pad)
    windows = ops.conv_windows(x_padded, kernel_h, kernel_w, stride)
    positions = np.nonzero(out_mask)
    n, rows, cols = positions
    columns = windows[n, :, rows, cols].reshape(len(n), channels * kernel_h * kernel_w)
    kernel = weight.data.reshape(out_channels, -1)
    values = columns @ kernel.T
    if bias is not None:
        values = values + bias.data
    out = np.zeros((batch, out_channels, out_h, out_w))
    out[n, :, rows, cols] = values

    def backward_rule(g):
        picked = g[n, :, rows, cols]
        grad_weight = (picked.T @ columns).reshape(weight.shape)
        grad_windows = (picked @ kernel).reshape(
            len(n), channels, kernel_h, kernel_w
        )
        grad_padded = ops.scatter_windows(
            grad_windows, x_padded.shape, stride, positions=positions
        )
        grad_x = grad_padded[:, :, padding : padding + height, padding : padding + width]
        grads = [grad_x * in_weights, grad_weight]
        if bias is not None:
            grads.append(picked.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return ops.result("sparse_conv2d", out, inputs, backward_rule)


def sparse_conv2d(
    inp: SparseFeatureMap, weight, bias=None, stride=1, padding=None, out_mask=None
):
    if stride not in (1, 2):
        raise SparseError(f"sparse_conv2d supports stride 1 or 2, got {stride}")
    if weight.shape[1] != inp.channels:
        raise SparseError(
            f"kernel expects {weight.shape[1]} channels, input has {inp.channels}"
        )
    if padding is None:
        padding = weight.shape[-1] // 2
    if stride == 1:
        if out_mask is not None and not np.array_equal(out_mask, inp.mask):
            raise SparseError("stride-1 sparse convolution must keep the input mask")
        out_mask = inp.mask
    elif out_mask is None:
        raise SparseError("stride-2 sparse convolution needs the target-scale mask")
    out_mask = np.asarray(out_mask, dtype=bool)
    features = gather_conv2d(
        inp.features, weight, bias, inp.mask, out_mask, stride, padding
    )
    return SparseFeatureMap(features, out_mask, inp.scale * stride).assert_canonical()


def sparse_batchnorm(inp: SparseFeatureMap, gamma, beta, state):
    """Statistike le po vidnih položajih; zakriti ostanejo natanko 0."""
    if not inp.mask.any():
        raise SparseError("sparse_batchnorm: no visible positions in the batch")
    features = ops.batch_norm(inp.features, gamma, beta, state, mask=inp.mask)
    return SparseFeatureMap(features, inp.mask, inp.scale).assert_canonical()


def sparse_map(inp: SparseFeatureMap, function):
    """Elementna funkcija f z f(0) = 0, npr. relu ali gelu."""
    return SparseFeatureMap(function(inp.features), inp.mask, inp.scale).assert_canonical()


def sparse_add(a: SparseFeatureMap, b: SparseFeatureMap):
    if not np.array_equal(a.mask, b.mask):
        raise SparseError("cannot add sparse maps with different masks")
    return SparseFeatureMap(a.features + b.features, a.mask, a.scale).assert_canonical()


def densify(inp: SparseFeatureMap, mask_embedding):
    """F_i + M_i: zakrite luknje zapolni z učljivim vektorjem maske."""
    if mask_embedding.shape != (inp.channels,):
        raise SparseError(
            f"mask embedding of shape {mask_embedding.shape} does not match"
            f" {inp.channels} feature channels"
        )
    holes = 1.0 - inp.weights
    return inp.features + mask_embedding.reshape(1, -1, 1, 1) * holes


@dataclass
class PatternReport:
    leaks: list = field(default_factory=list)
    positions: list = field(default_factory=list)

    @property
    def passed(self):
        return not any(self.leaks)


def mask_pattern_check(model_forward, images, hierarchy):
    """
    Za vsako stopnjo kodirnika preveri, da so neničelne značilke le na vidnih
    položajih ustrezne skale. model_forward(images, hierarchy) vrne seznam
    izhodov stopenj (redkih zemljevidov ali gostih tenzorjev).
    """
    report = PatternReport()
    with no_grad():
        stages = model_forward(images, hierarchy)
    for stage in stages:
        features = stage.features if isinstance(stage, SparseFeatureMap) else stage
        features = features.data if isinstance(features, Tensor) else features
        visible = hierarchy.at(*features.shape[-2:])
        leaked = np.any(features != 0, axis=1) & ~visible
        report.leaks.append(int(leaked.sum()))
        report.positions.append(np.argwhere(leaked))
    return report
