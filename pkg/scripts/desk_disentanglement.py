"""Desk-scale disentanglement run on the synthetic corpus.

Trains the segment autoencoder on 1800 synthetic segments, then reports on 200
held-out ones: content classifier accuracy, a fresh style-to-phone probe, and
silhouette scores.  Writes a JSON summary and the per-epoch history.

    python3 scripts/desk_disentanglement.py --out runs/desk --set d_s=2 --set critic_steps=5
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from phonestyle import plcsd
from phonestyle.config import PlcsdConfig
from phonestyle.evalmetrics import embedding_separability, mcd
from phonestyle.nnutil import deterministic_mode
from phonestyle.synthetic import SyntheticGenerator

RECIPE = dict(n_mels=20, d_c=16, d_s=2, encoder_width=64, decoder_width=64, classifier_hidden=0,
              discriminator_width=32, batch_size=32, learning_rates=(1e-3,) * 6, critic_steps=5,
              contrast_weight=10.0, max_epochs=40, patience=40, seed=0)


def measure(model, gen, train, test, test_styles, hidden):
    y_tr = np.array(gen.inventory.indices(s.phone for s in train))
    y_te = np.array(gen.inventory.indices(s.phone for s in test))
    zc, zs = plcsd.encode_content(test, model), plcsd.encode_style(test, model)
    probe = plcsd.fit_phone_probe(plcsd.encode_style(train, model), y_tr, gen.n_phones, hidden, seed=1)
    recon = plcsd.reconstruct_segments(test, model, max_frames=60)
    return {
        "content_acc": float((plcsd.classify_content_phone(zc, model).argmax(1) == y_te).mean()),
        "style_probe_acc": plcsd.probe_accuracy(probe, zs, y_te),
        "sil_content_phone": embedding_separability(zc, y_te),
        "sil_style_phone": embedding_separability(zs, y_te),
        "sil_style_style": embedding_separability(zs, test_styles),
        "heldout_mcd": float(np.mean([mcd(s.mel.frames, r.frames) for s, r in zip(test, recon)])),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=PYTHON_LITERAL")
    ap.add_argument("--every", type=int, default=5, help="measure every N epochs")
    args = ap.parse_args(argv)
    recipe = dict(RECIPE)
    for item in args.set:
        key, _, value = item.partition("=")
        recipe[key] = eval(value, {})  # trusted local input: numbers and tuples
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    gen = SyntheticGenerator(5, 3, seed=0)
    segs, styles = gen.segments(2000, seed=0)
    train, test, test_styles = segs[:1800], segs[1800:], styles[1800:]
    curve = []

    def on_epoch(tr, rec):
        if rec["epoch"] == 1 or rec["epoch"] % args.every == 0:
            row = {"epoch": rec["epoch"], "L_auto": rec["train"]["L_auto"],
                   **measure(tr.model, gen, train, test, test_styles, recipe["classifier_hidden"])}
            curve.append(row)
            print(json.dumps(row), flush=True)

    t0 = time.perf_counter()
    with deterministic_mode(True):
        trainer = plcsd.PlcsdTrainer(PlcsdConfig(**recipe), gen.inventory)
        trainer.fit(train, epoch_callback=on_epoch)
    summary = {"recipe": {k: list(v) if isinstance(v, tuple) else v for k, v in recipe.items()},
               "seconds": time.perf_counter() - t0, "epochs": trainer.epoch,
               "final": measure(trainer.model, gen, train, test, test_styles, recipe["classifier_hidden"]),
               "curve": curve, "history": trainer.history}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    trainer.save(out / "plcsd.ckpt")
    print(json.dumps(summary["final"]))


if __name__ == "__main__":
    main()
