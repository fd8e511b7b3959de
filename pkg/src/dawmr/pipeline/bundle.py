"""Model bundle: a directory with a text manifest and per-iteration binary files.

Layout::

    manifest.txt
    iter1/dict_s1_image.dwdc  iter1/normalizer.dwnm  iter1/mlp.dwmp
    iter2/...
"""

from __future__ import annotations

from pathlib import Path

from ..features import (EncoderConfig, FeatureExtractor, FeatureExtractorSpec, load_dictionary,
                        save_dictionary)
from ..features.normalizer import load_normalizer, save_normalizer
from ..mlp import MLPParams, load_mlp, save_mlp
from .iteration import IterationModel
from .recursive import DawmrModel, field_of_view, strict_field_of_view

BUNDLE_FORMAT = "dawmr-bundle 1"
MANIFEST = "manifest.txt"


class BundleFormatError(ValueError):
    pass


def _ints(v) -> str:
    return ",".join(str(int(a)) for a in v)


def _spec_lines(prefix: str, spec: FeatureExtractorSpec) -> list[str]:
    return [
        f"{prefix}.representation = {spec.representation}",
        f"{prefix}.dict_size = {spec.dict_size}",
        f"{prefix}.scales = {_ints(spec.scales)}",
        f"{prefix}.patch_shape = {_ints(spec.patch_shape)}",
        f"{prefix}.neighborhood = {_ints(spec.neighborhood)}",
        f"{prefix}.pooling = {spec.pooling}",
        f"{prefix}.groups = {','.join(spec.groups)}",
        f"{prefix}.encoder = {spec.encoder.method}",
        f"{prefix}.alpha = {spec.encoder.alpha!r}",
        f"{prefix}.feature_dims = {spec.dims}",
    ]


def save_model(model: DawmrModel, directory) -> Path:
    """Write ``model`` to ``directory`` (created if needed); returns the manifest path."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"format = {BUNDLE_FORMAT}", f"iterations = {model.k}",
             f"fov = {_ints(field_of_view(model))}",
             f"fov_strict = {_ints(strict_field_of_view(model))}"]
    for m in model.iterations:
        if not isinstance(m.mlp, MLPParams):
            raise TypeError("only MLPParams classifiers can be saved")
        sub = f"iter{m.iteration}"
        (root / sub).mkdir(exist_ok=True)
        p = f"iteration.{m.iteration}"
        lines += _spec_lines(p, m.spec)
        for (s, g), d in sorted(m.extractor.dictionaries.items()):
            name = f"{sub}/dict_s{s}_{g}.dwdc"
            save_dictionary(d, root / name)
            lines.append(f"{p}.dictionary.{s}.{g} = {name}")
        save_normalizer(m.normalizer, root / sub / "normalizer.dwnm")
        save_mlp(m.mlp, root / sub / "mlp.dwmp")
        lines += [f"{p}.normalizer = {sub}/normalizer.dwnm", f"{p}.mlp = {sub}/mlp.dwmp"]
    path = root / MANIFEST
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BundleFormatError(f"{path}:{n}: expected 'key = value'")
        k, v = (t.strip() for t in line.split("=", 1))
        out[k] = v
    return out


def load_model(directory) -> DawmrModel:
    root = Path(directory)
    man = read_manifest(root / MANIFEST)
    if man.get("format") != BUNDLE_FORMAT:
        raise BundleFormatError(f"{root}: unsupported bundle format {man.get('format')!r}")
    try:
        k = int(man["iterations"])
        models = []
        for i in range(1, k + 1):
            p = f"iteration.{i}"
            spec = FeatureExtractorSpec(
                representation=man[f"{p}.representation"],
                dict_size=int(man[f"{p}.dict_size"]),
                scales=tuple(int(a) for a in man[f"{p}.scales"].split(",")),
                patch_shape=tuple(int(a) for a in man[f"{p}.patch_shape"].split(",")),
                neighborhood=tuple(int(a) for a in man[f"{p}.neighborhood"].split(",")),
                pooling=man[f"{p}.pooling"],
                groups=tuple(man[f"{p}.groups"].split(",")),
                encoder=EncoderConfig(man[f"{p}.encoder"], float(man[f"{p}.alpha"])))
            dicts = {(s, g): load_dictionary(root / man[f"{p}.dictionary.{s}.{g}"])
                     for s in spec.scales for g in spec.groups}
            models.append(IterationModel(FeatureExtractor(spec, dicts),
                                         load_normalizer(root / man[f"{p}.normalizer"]),
                                         load_mlp(root / man[f"{p}.mlp"]), i))
    except KeyError as e:
        raise BundleFormatError(f"{root}: manifest lacks key {e.args[0]}") from None
    return DawmrModel(models)
