"""Dataset manifests: JSON listings tying feature, mesh, and template files together."""

from __future__ import annotations

import json
from pathlib import Path

from .features import load_features, save_features
from .mesh import load_mesh_sequence, load_template, save_mesh_sequence, save_template
from .training import DataItem

MANIFEST_NAME = "manifest.json"


def save_dataset(items: list[DataItem], out_dir) -> Path:
    """Write every item's files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    written_templates = {}
    counters: dict[str, int] = {}
    for item in items:
        subject = item.subject
        if subject not in written_templates:
            tpl_path = out_dir / f"{subject}.tpl"
            save_template(item.template, tpl_path)
            written_templates[subject] = tpl_path
        idx = counters.get(subject, 0)
        counters[subject] = idx + 1
        stem = f"{subject}__seq{idx:03d}"
        sft_path = out_dir / f"{stem}.sft"
        msq_path = out_dir / f"{stem}.msq"
        save_features(item.features, sft_path)
        save_mesh_sequence(item.gt, msq_path)
        entries.append({
            "features_path": sft_path.name,
            "mesh_path": msq_path.name,
            "template_path": written_templates[subject].name,
            "subject": subject,
            "emotion": item.emotion,
        })
    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(json.dumps({"items": entries}, indent=2), encoding="utf-8")
    return manifest_path


def load_dataset(manifest_path) -> list[DataItem]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(
            f"no dataset manifest at {manifest_path}; expected a JSON file listing "
            "items with features_path/mesh_path/template_path/subject/emotion")
    base = manifest_path.parent
    obj = json.loads(manifest_path.read_text(encoding="utf-8"))
    items = []
    templates = {}
    for entry in obj["items"]:
        tpl_key = entry["template_path"]
        if tpl_key not in templates:
            templates[tpl_key] = load_template(base / tpl_key, subject_id=entry["subject"])
        items.append(DataItem(
            features=load_features(base / entry["features_path"]),
            subject=entry["subject"],
            emotion=entry["emotion"],
            template=templates[tpl_key],
            gt=load_mesh_sequence(base / entry["mesh_path"]),
        ))
    return items
