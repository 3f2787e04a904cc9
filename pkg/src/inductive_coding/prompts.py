"""Prompt templates and their filling rules.

Placeholders are substituted in a single pass, so user text that happens to
contain a placeholder name (or braces) is inserted verbatim and never
re-expanded.
"""

from __future__ import annotations

import re
from typing import Mapping, Sequence

BACKGROUND = "{Background Information}"
GOAL = "{Goal of Inductive Coding}"
GOAL_LOWER = "{Goal of inductive coding}"

GENERATION_TEMPLATE = """{Background Information}

{Goal of Inductive Coding}
Instruction:
- Label the input only when it is HIGHLY RELEVANT and USEFUL for {Goal of Inductive Coding}.
- Then, define the phrase of the label. The label description should be observational, concise and clear.
- ONLY output the label and DO NOT output any explanation.

Format:
- Define the label using the format "LABEL: [The phrase of the label]".
- If there are multiple labels, each label is a new line.
- If the input is irrelevant, use "LABEL: [Irrelevant]".
- The label MUST NOT exceed 5 words.
"""

CLUSTER_TEMPLATE = (
    "Synthesize the entire list of labels by clustering similar labels that are inductively "
    "labeled. The clustering is to finalize MEANINGFUL and INSIGHTFUL THEMES for "
    "{Goal of inductive coding}. Output in json format where the key is the cluster, and the "
    "value is the list of input labels in that cluster. For each cluster, the value should only "
    "take labels from the user input. ONLY output the JSON object, and do not add any other text."
)

MERGE_TEMPLATE = """Synthesize the entire list of labels by clustering similar labels that are inductively labeled.
The clustering is to finalize MEANINGFUL and INSIGHTFUL THEMES for {Goal of Inductive Coding}
You will be provided with an existing codebook. Now you need to cluster the codes into clusters and provide one higher level code for each cluster of codes.

Guidelines for Clustering:
- Analyze existing codes and their corresponding segments and cluster the existing codes into clusters with corresponding higher level codes representing the whole cluster.

The existing codebook will be provided as input following this example below:
1. <code1>

-> <segment labeled with code1>

2. <code2>

-> <segment labeled with code2>

...

n. <codeN>

-> <segment labeled with codeN>

Provide your answers following this output format example below:
Ans:
{
"clusters": [
    {
    "high_level_code": "Cyber Harassment",
    "original_codes": ["Online Harassment", "Cyberbullying"],
    "justification": "Both refer to aggressive online behavior; Cyberbullying is a subset but can be generalized."
    }
]
}

When no clustering is needed, answer N/A and provide your answer following this output format below:
Ans: N/A"""

ASSIGNMENT_TEMPLATE = """{Goal of inductive coding}
Analyze the following segment to identify the best label from the codebook that should be assigned to this segment.

Segment will be given like below:
Segment:<segment text>

The existing codebook will be provided following this example below:
Codebook: 1. <code>, 2. <code>, ... , n. <code>

Provide your answers following this output format example below:
Ans: Cyber Harassment

Now given the existing codebook and the segment below, provide your answer following the format given above.
Codebook: <codebook>
Segment: <text_segment>"""


def fill(template: str, values: Mapping[str, str]) -> str:
    pattern = re.compile("|".join(re.escape(k) for k in sorted(values, key=len, reverse=True)))
    return pattern.sub(lambda m: values[m.group(0)], template)


def generation_system_prompt(background: str, goal: str) -> str:
    return fill(GENERATION_TEMPLATE, {BACKGROUND: background, GOAL: goal})


def cluster_system_prompt(goal: str) -> str:
    return fill(CLUSTER_TEMPLATE, {GOAL_LOWER: goal})


def cluster_user_prompt(items: Sequence[str]) -> str:
    return "\n".join(items)


def merge_system_prompt(goal: str) -> str:
    return fill(MERGE_TEMPLATE, {GOAL: goal})


def merge_user_prompt(entries: Sequence[tuple[str, str]]) -> str:
    """Render ``(code, example segment)`` pairs in the numbered codebook layout."""
    blocks = [f"{i}. {code}\n\n-> {example}" for i, (code, example) in enumerate(entries, start=1)]
    return "\n\n".join(blocks)


def codebook_line(themes: Sequence[str]) -> str:
    return ", ".join(f"{i}. {t}" for i, t in enumerate(themes, start=1))


def assignment_user_prompt(goal: str, themes: Sequence[str], segment_text: str) -> str:
    return fill(
        ASSIGNMENT_TEMPLATE,
        {
            GOAL_LOWER: goal,
            "Codebook: <codebook>": f"Codebook: {codebook_line(themes)}",
            "Segment: <text_segment>": f"Segment: {segment_text}",
        },
    )
