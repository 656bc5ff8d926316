"""Encode a source manifest into an embedding cache file."""

from __future__ import annotations

from datetime import datetime, timezone

from .cachefile import write_cache
from .manifest import MissingImage, SourceManifest, text_prompt


def encode_manifest(manifest: SourceManifest, encoder, output_path,
                    created: str | None = None) -> dict:
    """Run the encoder over every entry and write the cache.

    Image entries become ``img_<index>`` records with path/CoF/label payloads;
    text entries become ``txt_<index>`` records whose encoded string is exactly
    "<material> and <against>".  Returns summary stats.
    """
    for entry in manifest.images:
        if not manifest.image_path(entry).exists():
            raise MissingImage(f"image not found: {manifest.image_path(entry)}")

    records = []
    for i, entry in enumerate(manifest.images):
        vec = encoder.encode_image(manifest.image_path(entry))
        payload = {"path": entry.path}
        if entry.cof is not None:
            payload["cof"] = entry.cof
        if entry.label is not None:
            payload["label"] = entry.label
        records.append({"id": f"img_{i:04d}", "kind": "image",
                        "vector": vec, "payload": payload})
    for i, entry in enumerate(manifest.texts):
        vec = encoder.encode_text(text_prompt(entry))
        records.append({"id": f"txt_{i:04d}", "kind": "text", "vector": vec,
                        "payload": {"material": entry.material,
                                    "against": entry.against, "cof": entry.cof}})

    if created is None:
        created = datetime.now(timezone.utc).isoformat(timespec="seconds")
    write_cache(output_path, encoder.dimension, encoder.name, records, created)
    return {"images": len(manifest.images), "texts": len(manifest.texts),
            "dimension": encoder.dimension, "encoder": encoder.name}
