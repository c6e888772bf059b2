"""Ablation: the desk recipe with the style adversary switched off.

Sub-steps 3 and 4 still run and their losses are still logged, but their
objectives are scaled to zero, so neither C_s nor the style encoder receives an
adversarial update.  Compare the style probe and silhouettes with
``desk_disentanglement.py``.

    python3 scripts/ablation_no_adversary.py --out runs/ablation
"""
import desk_disentanglement as desk
from phonestyle import plcsd

_substep_losses = plcsd._substep_losses


def _without_style_adversary(model, batch, name):
    objective, parts = _substep_losses(model, batch, name)
    if name in ("style_dis", "style_gen"):
        objective = objective * 0.0
    return objective, parts


if __name__ == "__main__":
    plcsd._substep_losses = _without_style_adversary
    desk.main()
