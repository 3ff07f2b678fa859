"""Task names, output dimensions, and label conventions."""

VA = "va"
EXPR = "expr"
AU = "au"

TASKS = (VA, EXPR, AU)

# Per-frame prediction width per task: valence+arousal, 8 expression
# classes, 12 binary action units.
OUTPUT_DIMS = {VA: 2, EXPR: 8, AU: 12}

EXPR_NAMES = (
    "anger",
    "disgust",
    "fear",
    "happiness",
    "sadness",
    "surprise",
    "neutral",
    "other",
)

AU_NAMES = (
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10",
    "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
)

# Annotation subdirectory per task.
TASK_DIRS = {VA: "VA", EXPR: "EXPR", AU: "AU"}

# Invalid-frame sentinels written to annotation files. Expr and AU use -1;
# VA uses -5 since -1 is a legal valence/arousal value.
VA_INVALID = -5.0
LABEL_INVALID = -1


def check_task(task):
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    return task
