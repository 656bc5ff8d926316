"""Source manifest: the images and friction-table texts to encode.

YAML layout::

    images:
      - path: surfaces/ice_01.jpg
        cof: 0.1            # optional ground-truth friction
        label: icy sidewalk # optional
    texts:
      - material: Wrought iron
        against: wrought iron
        cof: 0.44
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

MU_MAX = 2.0


class ManifestError(Exception):
    pass


class MissingImage(ManifestError):
    pass


@dataclass(frozen=True)
class ImageEntry:
    path: str
    cof: float | None = None
    label: str | None = None


@dataclass(frozen=True)
class TextEntry:
    material: str
    against: str
    cof: float


@dataclass(frozen=True)
class SourceManifest:
    images: tuple[ImageEntry, ...] = ()
    texts: tuple[TextEntry, ...] = ()
    base_dir: Path = field(default_factory=Path)

    def image_path(self, entry: ImageEntry) -> Path:
        return self.base_dir / entry.path


def text_prompt(entry: TextEntry) -> str:
    """The exact string fed to the text encoder."""
    return f"{entry.material} and {entry.against}"


def load_manifest(path) -> SourceManifest:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ManifestError(f"malformed YAML in {path}: {e}") from e
    if not isinstance(data, dict):
        raise ManifestError(f"{path}: manifest root must be a mapping")
    unknown = data.keys() - {"images", "texts"}
    if unknown:
        raise ManifestError(f"{path}: unknown manifest sections {sorted(unknown)}")

    images = []
    for i, raw in enumerate(data.get("images") or []):
        if "path" not in raw:
            raise ManifestError(f"{path}: images[{i}] is missing 'path'")
        cof = raw.get("cof")
        if cof is not None and not 0.0 <= float(cof) <= MU_MAX:
            raise ManifestError(
                f"{path}: images[{i}] CoF {cof} outside [0, {MU_MAX}]")
        images.append(ImageEntry(path=str(raw["path"]),
                                 cof=None if cof is None else float(cof),
                                 label=raw.get("label")))
    texts = []
    for i, raw in enumerate(data.get("texts") or []):
        missing = {"material", "against", "cof"} - raw.keys()
        if missing:
            raise ManifestError(f"{path}: texts[{i}] is missing {sorted(missing)}")
        cof = float(raw["cof"])
        if not 0.0 <= cof <= MU_MAX:
            raise ManifestError(f"{path}: texts[{i}] CoF {cof} outside [0, {MU_MAX}]")
        texts.append(TextEntry(material=str(raw["material"]),
                               against=str(raw["against"]), cof=cof))
    return SourceManifest(images=tuple(images), texts=tuple(texts),
                          base_dir=path.parent)
