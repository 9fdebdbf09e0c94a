"""Canonical 180-class anatomical ontology.

Class ids are 1-based in listing order; 0 is background. Each class belongs to
exactly one of the eight body systems. English terms are derived from the
class name (laterality moved to the front) plus a few synonyms; Chinese terms
exist for the organs the phantom generator commonly uses.
"""

from __future__ import annotations

SYSTEMS = (
    "nervous",
    "circulatory",
    "respiratory",
    "digestive",
    "urinary",
    "reproductive",
    "endocrine",
    "musculoskeletal",
)


def _lr(name):
    return [f"{name}_left", f"{name}_right"]


_NERVOUS = ["brain", "cerebellum", "brainstem", "spinal_cord", *_lr("optic_nerve"),
            "cauda_equina", *_lr("sciatic_nerve"), *_lr("brachial_plexus")]
_CIRCULATORY = ["heart", "aorta", "pulmonary_artery", "pulmonary_vein", "superior_vena_cava",
                "inferior_vena_cava", "portal_vein_and_splenic_vein", "brachiocephalic_trunk",
                *_lr("subclavian_artery"), *_lr("common_carotid_artery"),
                *_lr("brachiocephalic_vein"), "atrial_appendage_left", *_lr("iliac_artery"),
                *_lr("iliac_vena"), "spleen", *_lr("femoral_artery"), *_lr("femoral_vein"),
                *_lr("jugular_vein"), "celiac_trunk", *_lr("renal_artery"), *_lr("renal_vein")]
_RESPIRATORY = ["lung_left", "lung_right", "trachea", "larynx", "nasal_cavity", "pharynx",
                *_lr("main_bronchus")]
_DIGESTIVE = ["esophagus", "stomach", "duodenum", "small_bowel", "colon", "rectum", "liver",
              "gallbladder", "pancreas", *_lr("parotid_gland"), *_lr("submandibular_gland"),
              "tongue", "appendix"]
_URINARY = [*_lr("kidney"), "urinary_bladder", *_lr("ureter"), "urethra"]
_REPRODUCTIVE = ["prostate", "seminal_vesicle", *_lr("testis"), "uterus", *_lr("ovary"),
                 *_lr("breast")]
_ENDOCRINE = ["thyroid_gland", *_lr("adrenal_gland"), "pituitary_gland", "thymus"]
_MUSCULOSKELETAL = (
    ["skull", "mandible"]
    + [f"vertebra_c{i}" for i in range(1, 8)]
    + [f"vertebra_t{i}" for i in range(1, 13)]
    + [f"vertebra_l{i}" for i in range(1, 6)]
    + ["sacrum"]
    + [f"rib_left_{i}" for i in range(1, 13)]
    + [f"rib_right_{i}" for i in range(1, 13)]
    + ["sternum", "costal_cartilages", *_lr("clavicula"), *_lr("scapula"), *_lr("humerus"),
       *_lr("radius"), *_lr("ulna"), *_lr("hand"), *_lr("hip"), *_lr("femur"), *_lr("patella"),
       *_lr("tibia"), *_lr("fibula"), *_lr("foot"), *_lr("gluteus_maximus"),
       *_lr("gluteus_medius"), *_lr("gluteus_minimus"), *_lr("autochthon"), *_lr("iliopsoas"),
       *_lr("quadriceps"), *_lr("hamstrings"), *_lr("calf_muscles"), "skeletal_muscle",
       "subcutaneous_fat"]
)

_GROUPS = {
    "nervous": _NERVOUS,
    "circulatory": _CIRCULATORY,
    "respiratory": _RESPIRATORY,
    "digestive": _DIGESTIVE,
    "urinary": _URINARY,
    "reproductive": _REPRODUCTIVE,
    "endocrine": _ENDOCRINE,
    "musculoskeletal": _MUSCULOSKELETAL,
}

CLASS_NAMES: tuple = tuple(name for system in SYSTEMS for name in _GROUPS[system])
assert len(CLASS_NAMES) == 180, len(CLASS_NAMES)
assert len(set(CLASS_NAMES)) == 180

CLASS_IDS: dict = {name: i + 1 for i, name in enumerate(CLASS_NAMES)}
NUM_CLASSES = 180

SYSTEM_OF: dict = {CLASS_IDS[name]: system for system in SYSTEMS for name in _GROUPS[system]}

_SYNONYMS = {
    "liver": ["hepatic parenchyma"],
    "urinary_bladder": ["bladder"],
    "brain": ["cerebrum"],
    "heart": ["myocardium"],
    "small_bowel": ["small intestine"],
    "colon": ["large bowel"],
    "stomach": ["gastric wall"],
    "thyroid_gland": ["thyroid"],
    "spleen": ["splenic parenchyma"],
    "skeletal_muscle": ["muscle"],
    "subcutaneous_fat": ["subcutaneous tissue"],
    "esophagus": ["oesophagus"],
}

ZH_TERMS = {
    "brain": ["脑"],
    "spinal_cord": ["脊髓"],
    "heart": ["心脏"],
    "aorta": ["主动脉"],
    "spleen": ["脾脏", "脾"],
    "lung_left": ["左肺"],
    "lung_right": ["右肺"],
    "trachea": ["气管"],
    "esophagus": ["食管"],
    "stomach": ["胃"],
    "small_bowel": ["小肠"],
    "colon": ["结肠"],
    "rectum": ["直肠"],
    "liver": ["肝脏", "肝"],
    "gallbladder": ["胆囊"],
    "pancreas": ["胰腺"],
    "kidney_left": ["左肾"],
    "kidney_right": ["右肾"],
    "urinary_bladder": ["膀胱"],
    "prostate": ["前列腺"],
    "uterus": ["子宫"],
    "thyroid_gland": ["甲状腺"],
    "adrenal_gland_left": ["左肾上腺"],
    "adrenal_gland_right": ["右肾上腺"],
    "humerus_left": ["左肱骨"],
    "humerus_right": ["右肱骨"],
    "femur_left": ["左股骨"],
    "femur_right": ["右股骨"],
    "skeletal_muscle": ["骨骼肌"],
    "subcutaneous_fat": ["皮下脂肪"],
}


def english_terms(name: str) -> list:
    words = name.split("_")
    side = None
    for s in ("left", "right"):
        if s in words:
            side = s
            words = [w for w in words if w != s]
    base = " ".join(words)
    if side is None:
        terms = [base]
    else:
        terms = [f"{side} {base}", f"{'lt' if side == 'left' else 'rt'} {base}"]
    return terms + _SYNONYMS.get(name, [])


# Classes used to derive axial partition landmarks.
LANDMARK_CLASSES = {
    "lung": (CLASS_IDS["lung_left"], CLASS_IDS["lung_right"]),
    "liver": (CLASS_IDS["liver"],),
    "bladder": (CLASS_IDS["urinary_bladder"],),
    "femur": (CLASS_IDS["femur_left"], CLASS_IDS["femur_right"]),
}

UPPER_LIMB_CLASSES = tuple(
    CLASS_IDS[n] for n in (*_lr("humerus"), *_lr("radius"), *_lr("ulna"), *_lr("hand"))
)

BLADDER = CLASS_IDS["urinary_bladder"]


def resolve_class(ref) -> int:
    """Accept a class id or a canonical name."""
    if isinstance(ref, str):
        try:
            return CLASS_IDS[ref]
        except KeyError:
            raise KeyError(f"unknown anatomical class {ref!r}") from None
    cid = int(ref)
    if not 1 <= cid <= NUM_CLASSES:
        raise KeyError(f"class id {cid} outside 1..{NUM_CLASSES}")
    return cid


def class_name(cid: int) -> str:
    return CLASS_NAMES[cid - 1]
