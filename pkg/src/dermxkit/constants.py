DISEASES = (
    "acne",
    "actinic keratosis",
    "psoriasis",
    "seborrheic dermatitis",
    "viral warts",
    "vitiligo",
)

OTHER = "other"

SOURCES = ("DermNetNZ", "SD260")

# Localizable characteristics taxonomy: basic terms, then additional terms.
CHARACTERISTICS = (
    "macule",
    "nodule",
    "papule",
    "patch",
    "plaque",
    "pustule",
    "scale",
    "closed comedo",
    "cyst",
    "dermatoglyph disruption",
    "leukotrichia",
    "open comedo",
    "scar",
    "sun damage",
    "telangiectasia",
    "thrombosed capillaries",
)

# The set that survives the sample-count and agreement filters on DermXDB.
RETAINED_CHARACTERISTICS = (
    "closed comedo",
    "dermatoglyph disruption",
    "open comedo",
    "papule",
    "patch",
    "plaque",
    "pustule",
    "scale",
    "scar",
    "sun damage",
)

EPS_PROB = 1e-7
EPS_DICE = 1e-6
