"""Command-line driver for the two-stage pipeline.

Layout under ``output_dir``::

    prepare/    manifest.json, splits.json, segments.json, mels/*.mel
    plcsd/      plcsd_last.ckpt, plcsd_best.ckpt, train_log.jsonl
    acoustic/   acoustic_last.ckpt
    predictor/  predictor.ckpt
    generate/   <mode>_<name>.{mel,wav,json}
    eval/       report.json
    embeddings/ embeddings.tsv

Every stage drops a ``stage.json`` recording the stage name and run config hash.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import acoustic, evalmetrics, plcsd, synth
from .config import RunConfig, config_hash, from_dict, to_dict
from .corpus import (PhoneInventory, Utterance, compute_mel, load_alignment, load_manifest, read_wav, resolve,
                     save_alignment, segment_utterance, split_dataset)
from .errors import MissingStageError, NumericError, ValidationError
from .formats import file_sha256, load_mel, save_mel
from .nnutil import deterministic_mode
from .synthetic import SyntheticGenerator

log = logging.getLogger("phonestyle")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_MISSING_STAGE = 0, 2, 3, 4


# --- run context -------------------------------------------------------------------

class Run:
    def __init__(self, config: RunConfig, config_dir: Path):
        self.config = config
        self.config_dir = config_dir
        self.hash = config_hash(config)
        self.root = resolve(config_dir, config.output_dir)

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def provenance(self, stage: str) -> dict:
        return {"stage": stage, "config_hash": self.hash, "run_config": to_dict(self.config)}

    def mark(self, stage: str, **info):
        d = self.dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        (d / "stage.json").write_text(json.dumps({"stage": stage, "config_hash": self.hash, **info}, indent=1))

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingStageError(f"{path} not found; run `{stage}` first")
        return path


def load_run(path: str | None, overrides: list[str]) -> Run:
    if path is None:
        raw, base = {}, Path.cwd()
    else:
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"config file {p} does not exist")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{p}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        base = p.parent
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"override {item!r} must look like section.key=value")
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass  # bare strings
        node = raw
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return Run(from_dict(RunConfig, raw).validate(), base)


# --- prepared data -----------------------------------------------------------------

def _input_fingerprint(run: Run, manifest_path: Path, records) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(to_dict(run.config.mel), sort_keys=True).encode())
    h.update(json.dumps([run.config.seed, run.config.train_fraction]).encode())
    h.update(manifest_path.read_bytes())
    base = manifest_path.parent
    for rec in records:
        for key in ("audio_path", "mel_path", "alignment_path"):
            if key in rec:
                p = resolve(base, rec[key])
                if p.exists():
                    st = p.stat()
                    h.update(f"{p}:{st.st_size}:{st.st_mtime_ns}".encode())
    return h.hexdigest()


def cmd_prepare(run: Run, args) -> int:
    cfg = run.config
    if not cfg.manifest:
        raise ValidationError("config.manifest is empty")
    manifest_path = resolve(run.config_dir, cfg.manifest)
    if not manifest_path.exists():
        raise ValidationError(f"manifest {manifest_path} does not exist")
    records = load_manifest(manifest_path)
    out = run.dir("prepare")
    fingerprint = _input_fingerprint(run, manifest_path, records)
    stage_file = out / "stage.json"
    if stage_file.exists() and not args.force:
        prev = json.loads(stage_file.read_text())
        if prev.get("fingerprint") == fingerprint:
            log.info("prepare: cache hit (%d utterances), nothing to do", prev.get("n_utterances", 0))
            return EXIT_OK
    mel_dir = out / "mels"
    mel_dir.mkdir(parents=True, exist_ok=True)
    base = manifest_path.parent
    kept, rejects, seg_rows = [], [], []
    for rec in records:
        uid = rec["id"]
        if "mel_path" in rec:
            src = resolve(base, rec["mel_path"])
            if not src.exists():
                raise ValidationError(f"utterance {uid}: mel file {src} not found")
            mel = load_mel(src)
            if mel.n_mels != cfg.mel.n_mels:
                raise ValidationError(f"utterance {uid}: mel has {mel.n_mels} bands, config expects {cfg.mel.n_mels}")
            audio_ref = str(src)
        else:
            src = resolve(base, rec["audio_path"])
            if not src.exists():
                raise ValidationError(f"utterance {uid}: audio file {src} not found")
            audio, sr = read_wav(src)
            mel = compute_mel(audio, sr, cfg.mel)
            audio_ref = str(src)
        align_path = resolve(base, rec["alignment_path"])
        if not align_path.exists():
            raise ValidationError(f"utterance {uid}: alignment file {align_path} not found")
        utt = Utterance(uid, audio_ref, list(rec["phones"]), load_alignment(align_path), mel)
        try:
            utt.validate(frozenset(cfg.mel.silence_labels))
            segs = segment_utterance(utt, frozenset(cfg.mel.silence_labels))
        except ValidationError as exc:
            rejects.append({"id": uid, "reason": str(exc)})
            log.warning("prepare: rejecting %s: %s", uid, exc)
            continue
        mel_out = mel_dir / f"{uid}.mel"
        save_mel(mel_out, mel)
        kept.append({"id": uid, "phones": list(rec["phones"]), "alignment_path": str(align_path),
                     "mel_path": str(mel_out), "source": audio_ref, "n_frames": mel.n_frames})
        seg_rows.extend({"utterance_id": uid, "index": s.index_in_utterance, "phone": s.phone,
                         "start": s.frame_range[0], "end": s.frame_range[1]} for s in segs)
    if len(kept) < 2:
        raise ValidationError(f"only {len(kept)} usable utterances after preparation")
    train, test = split_dataset([k["id"] for k in kept], cfg.train_fraction, cfg.seed)
    prov = {"stage": "prepare", "config_hash": run.hash}
    (out / "manifest.json").write_text(json.dumps({**prov, "utterances": kept, "rejects": rejects}, indent=1))
    (out / "splits.json").write_text(json.dumps({**prov, "train": train, "test": test}, indent=1))
    (out / "segments.json").write_text(json.dumps({**prov, "segments": seg_rows}))
    run.mark("prepare", fingerprint=fingerprint, n_utterances=len(kept), n_rejected=len(rejects),
             n_input=len(records), n_segments=len(seg_rows))
    log.info("prepare: %d utterances kept, %d rejected, %d segments", len(kept), len(rejects), len(seg_rows))
    return EXIT_OK


def load_prepared(run: Run):
    """Return ``({id: Utterance}, splits)`` from the prepare stage."""
    out = run.dir("prepare")
    run.require(out / "stage.json", "prepare")
    man = json.loads((out / "manifest.json").read_text())
    splits = json.loads((out / "splits.json").read_text())
    utts = {}
    for rec in man["utterances"]:
        mel = load_mel(rec["mel_path"])
        utts[rec["id"]] = Utterance(rec["id"], rec["source"], rec["phones"], load_alignment(rec["alignment_path"]),
                                    mel)
    return utts, splits


def _segments(run: Run, utts):
    silence = frozenset(run.config.mel.silence_labels)
    return [s for u in utts for s in segment_utterance(u, silence)]


# --- training stages -----------------------------------------------------------------

def plcsd_checkpoint(run: Run) -> Path:
    d = run.dir("plcsd")
    best = d / "plcsd_best.ckpt"
    return best if best.exists() else run.require(d / "plcsd_last.ckpt", "train-plcsd")


def cmd_train_plcsd(run: Run, args) -> int:
    utts, splits = load_prepared(run)
    train = _segments(run, [utts[i] for i in splits["train"]])
    val = _segments(run, [utts[i] for i in splits["test"]])
    out = run.dir("plcsd")
    out.mkdir(parents=True, exist_ok=True)
    last = out / "plcsd_last.ckpt"
    if args.resume and last.exists():
        trainer = plcsd.PlcsdTrainer.from_checkpoint(last)
        log.info("train-plcsd: resuming from epoch %d", trainer.epoch)
    else:
        inventory = _inventory_for(run, train)
        trainer = plcsd.PlcsdTrainer(run.config.plcsd, inventory)
        (out / "train_log.jsonl").unlink(missing_ok=True)
    trainer.provenance = run.provenance("train-plcsd")
    trainer.fit(train, val or None, checkpoint_dir=out, log_path=out / "train_log.jsonl")
    run.mark("plcsd", epochs=trainer.epoch, checkpoint=str(plcsd_checkpoint(run)))
    return EXIT_OK


def _inventory_for(run: Run, segments):
    inventory = PhoneInventory(tuple(run.config.phones)) if run.config.phones else PhoneInventory.arpabet()
    unknown = sorted({s.phone for s in segments} - set(inventory.phones))
    if unknown:
        raise ValidationError(f"phones outside the inventory: {unknown}")
    return inventory


def cmd_train_utterance(run: Run, args) -> int:
    ckpt = plcsd_checkpoint(run)
    style_model = plcsd.PlcsdTrainer.from_checkpoint(ckpt).model.eval()
    utts, splits = load_prepared(run)
    out = run.dir("acoustic")
    out.mkdir(parents=True, exist_ok=True)
    last = out / "acoustic_last.ckpt"
    if args.resume and last.exists():
        trainer = acoustic.AcousticTrainer.from_checkpoint(last)
    else:
        trainer = acoustic.AcousticTrainer(run.config.acoustic, style_model.inventory)
    trainer.provenance = {**run.provenance("train-utterance"), "plcsd_checkpoint_sha256": file_sha256(ckpt)}
    data = trainer.prepare([utts[i] for i in splits["train"]], style_model, run.config.mel.silence_labels)
    trainer.fit(data, epoch_callback=lambda tr, rec: tr.save(last))
    trainer.save(last)
    run.mark("acoustic", epochs=trainer.epoch, skipped=trainer.skipped)
    return EXIT_OK


def cmd_train_predictor(run: Run, args) -> int:
    ckpt = plcsd_checkpoint(run)
    ac_path = run.require(run.dir("acoustic") / "acoustic_last.ckpt", "train-utterance")
    style_model = plcsd.PlcsdTrainer.from_checkpoint(ckpt).model.eval()
    text_encoder = acoustic.AcousticTrainer.from_checkpoint(ac_path).text_encoder.eval()
    utts, splits = load_prepared(run)
    pairs = acoustic.build_predictor_pairs([utts[i] for i in splits["train"]], text_encoder, style_model)
    trainer = acoustic.PredictorTrainer(run.config.predictor)
    trainer.provenance = {**run.provenance("train-predictor"), "acoustic_checkpoint_sha256": file_sha256(ac_path)}
    trainer.fit(pairs)
    out = run.dir("predictor")
    out.mkdir(parents=True, exist_ok=True)
    trainer.save(out / "predictor.ckpt")
    run.mark("predictor", epochs=trainer.epoch)
    return EXIT_OK


# --- generation -------------------------------------------------------------------------

def load_models(run: Run, need_predictor: bool) -> synth.SynthesisModels:
    p_path = plcsd_checkpoint(run)
    a_path = run.require(run.dir("acoustic") / "acoustic_last.ckpt", "train-utterance")
    hashes = {"plcsd": file_sha256(p_path), "acoustic": file_sha256(a_path)}
    ac = acoustic.AcousticTrainer.from_checkpoint(a_path)
    predictor = None
    if need_predictor:
        pr_path = run.require(run.dir("predictor") / "predictor.ckpt", "train-predictor")
        predictor = acoustic.PredictorTrainer.from_checkpoint(pr_path).model
        hashes["predictor"] = file_sha256(pr_path)
    models = synth.SynthesisModels(plcsd.PlcsdTrainer.from_checkpoint(p_path).model, ac.text_encoder, ac.acoustic,
                                   predictor, checkpoint_hashes=hashes)
    return models.eval()


def read_phone_file(path) -> list[str]:
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"phone file {p} does not exist")
    phones = p.read_text().split()
    if not phones:
        raise ValidationError(f"phone file {p} is empty")
    return phones


def _generate(run: Run, args, mode: str) -> int:
    if mode == "transfer" and not args.ref:
        raise ValidationError("transfer mode needs --ref")
    if mode in ("transfer", "tts") and not args.text_phones:
        raise ValidationError(f"{mode} mode needs --text-phones")
    models = load_models(run, need_predictor=(mode == "tts"))
    phones = read_phone_file(args.text_phones) if mode != "reconstruct" else []
    reference = None
    ref_id = args.utt if mode == "reconstruct" else getattr(args, "ref", None)
    if ref_id:
        utts, _ = load_prepared(run)
        if ref_id not in utts:
            raise ValidationError(f"unknown utterance id {ref_id!r}")
        reference = utts[ref_id]
    unknown = [p for p in phones if p not in models.inventory]
    if unknown:
        raise ValidationError(f"phones not in inventory: {unknown}")
    name = args.name or (ref_id if mode == "reconstruct" else Path(args.text_phones).stem)
    stem = run.dir("generate") / f"{mode}_{name}"
    req = synth.GenerationRequest(mode, phones, reference, str(stem))
    sidecar = synth.run_request(req, models, run.config.mel, run.config.vocoder,
                                extra_sidecar={"stage": mode, "config_hash": run.hash},
                                write_audio=not args.no_audio)
    print(json.dumps(sidecar))
    return EXIT_OK


# --- evaluation -------------------------------------------------------------------------

def _load_pair_side(path: Path, run: Run):
    if not path.exists():
        raise ValidationError(f"{path} does not exist")
    if path.suffix == ".wav":
        audio, sr = read_wav(path)
        return audio, sr, compute_mel(audio, sr, run.config.mel)
    return None, None, load_mel(path)


def evaluate_files(ref: Path, syn: Path, run: Run) -> dict:
    ra, rsr, rmel = _load_pair_side(ref, run)
    sa, ssr, smel = _load_pair_side(syn, run)
    if ra is not None and sa is not None:
        if rsr != ssr:
            raise ValidationError(f"sample rates differ: {ref} ({rsr}) vs {syn} ({ssr})")
        rep = evalmetrics.evaluate_pair(ra, sa, rmel.frames, smel.frames, rsr, run.config.pitch).to_json()
    else:
        rep = {"vde": None, "gpe": None, "ffe": None, "mcd": evalmetrics.mcd(rmel.frames, smel.frames),
               "n_frames": None, "gpe_defined": False}
    return {"reference": str(ref), "synthesized": str(syn), **rep}


def cmd_evaluate(run: Run, args) -> int:
    pairs = []
    if args.pairs:
        try:
            raw = json.loads(Path(args.pairs).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read pair list {args.pairs}: {exc}") from exc
        pairs = [(Path(p["reference"]), Path(p["synthesized"])) for p in raw]
    if args.ref or args.syn:
        if not (args.ref and args.syn):
            raise ValidationError("--ref and --syn must be given together")
        pairs.append((Path(args.ref), Path(args.syn)))
    if not pairs:
        raise ValidationError("nothing to evaluate: give --pairs or --ref/--syn")
    results = [evaluate_files(r, s, run) for r, s in pairs]
    summary = {}
    for key in ("vde", "gpe", "ffe", "mcd"):
        vals = [r[key] for r in results if r[key] is not None and (key != "gpe" or r["gpe_defined"])]
        summary[key] = float(np.mean(vals)) if vals else None
    report = {"stage": "evaluate", "config_hash": run.hash, "summary": summary, "pairs": results}
    out = Path(args.out) if args.out else run.dir("eval") / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1))
    if args.frames_csv:
        _write_frame_csv(Path(args.frames_csv), pairs, run)
    if args.asr_manifest:
        items = []
        for _, syn in pairs:
            side = syn.with_suffix(".json")
            ref_text = " ".join(json.loads(side.read_text())["source_phones"]) if side.exists() else ""
            items.append((syn, ref_text))
        evalmetrics.write_asr_manifest(args.asr_manifest, items)
    print(json.dumps(summary))
    return EXIT_OK


def _write_frame_csv(path: Path, pairs, run: Run):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "frame", "ref_f0", "syn_f0", "ref_voiced", "syn_voiced"])
        for k, (ref, syn) in enumerate(pairs):
            ra, rsr, _ = _load_pair_side(ref, run)
            sa, ssr, _ = _load_pair_side(syn, run)
            if ra is None or sa is None:
                continue
            a, b = evalmetrics.align_tracks(evalmetrics.extract_pitch(ra, rsr, run.config.pitch),
                                            evalmetrics.extract_pitch(sa, ssr, run.config.pitch))
            for i in range(len(a)):
                w.writerow([k, i, a.f0[i], b.f0[i], int(a.voiced[i]), int(b.voiced[i])])


def cmd_export_embeddings(run: Run, args) -> int:
    model = plcsd.PlcsdTrainer.from_checkpoint(plcsd_checkpoint(run)).model.eval()
    utts, splits = load_prepared(run)
    ids = splits["train"] + splits["test"] if args.split == "all" else splits[args.split]
    segs = _segments(run, [utts[i] for i in ids])
    if args.phones:
        segs = evalmetrics.sample_per_phone(segs, args.phones.split(","), args.per_phone, run.config.seed)
    if not segs:
        raise ValidationError("no segments selected for export")
    out = Path(args.out) if args.out else run.dir("embeddings") / "embeddings.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    evalmetrics.export_embeddings(segs, model, out)
    out.with_suffix(".json").write_text(json.dumps(
        {"stage": "export-embeddings", "config_hash": run.hash, "n_segments": len(segs), "rows": 2 * len(segs)}))
    log.info("wrote %d rows to %s", 2 * len(segs), out)
    return EXIT_OK


# --- synthetic corpus -------------------------------------------------------------------------

def cmd_make_synthetic(args) -> int:
    out = Path(args.out)
    (out / "mels").mkdir(parents=True, exist_ok=True)
    (out / "alignments").mkdir(parents=True, exist_ok=True)
    gen = SyntheticGenerator(args.n_phones, args.n_styles, seed=args.seed, n_mels=args.n_mels)
    utts, styles = gen.utterances(args.n_utterances, seed=args.seed + 1)
    records = []
    for utt, st in zip(utts, styles):
        save_mel(out / "mels" / f"{utt.id}.mel", utt.mel)
        save_alignment(out / "alignments" / f"{utt.id}.json", utt.id, utt.alignment)
        records.append({"id": utt.id, "phones": utt.phone_sequence, "mel_path": f"mels/{utt.id}.mel",
                        "alignment_path": f"alignments/{utt.id}.json"})
    (out / "manifest.json").write_text(json.dumps(records, indent=1))
    # hidden factors: for evaluation only, never read by training
    (out / "hidden_styles.json").write_text(json.dumps({u.id: [int(x) for x in s] for u, s in zip(utts, styles)}))
    config = {
        "manifest": "manifest.json", "output_dir": "run", "seed": args.seed,
        "phones": list(gen.inventory.phones),
        "mel": {"n_mels": args.n_mels},
        "plcsd": {"n_mels": args.n_mels, "d_c": 16, "d_s": 16, "encoder_width": 64, "decoder_width": 64,
                  "classifier_hidden": 32, "discriminator_width": 32, "max_epochs": 20},
        "acoustic": {"n_mels": args.n_mels, "d_t": 16, "d_s": 16, "phone_embedding": 32, "prenet_width": 64,
                     "attention_rnn_width": 128, "decoder_rnn_width": 128, "attention_dim": 64,
                     "location_filters": 8, "location_kernel": 7, "epochs": 30, "max_decode_frames": 200},
        "predictor": {"d_t": 16, "d_s": 16, "model_dim": 32, "conv_hidden": 64, "epochs": 30},
    }
    (out / "config.json").write_text(json.dumps(config, indent=1))
    log.info("wrote %d synthetic utterances to %s", len(records), out)
    return EXIT_OK


# --- entry point -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phonestyle", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. plcsd.max_epochs=5")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="compute mels, segment, split")
    p.add_argument("--force", action="store_true", help="ignore the cache")
    for name in ("train-plcsd", "train-utterance"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    sub.add_parser("train-predictor", parents=[common])

    gen_common = argparse.ArgumentParser(add_help=False)
    gen_common.add_argument("--name", help="output file stem")
    gen_common.add_argument("--no-audio", action="store_true", help="skip Griffin-Lim, write the mel only")
    p = sub.add_parser("reconstruct", parents=[common, gen_common])
    p.add_argument("--utt", required=True)
    p = sub.add_parser("transfer", parents=[common, gen_common])
    p.add_argument("--text-phones", required=True)
    p.add_argument("--ref")
    p = sub.add_parser("tts", parents=[common, gen_common])
    p.add_argument("--text-phones", required=True)

    p = sub.add_parser("evaluate", parents=[common])
    p.add_argument("--pairs", help='JSON list of {"reference": path, "synthesized": path}')
    p.add_argument("--ref")
    p.add_argument("--syn")
    p.add_argument("--out")
    p.add_argument("--frames-csv")
    p.add_argument("--asr-manifest")

    p = sub.add_parser("export-embeddings", parents=[common])
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--phones", help="comma-separated phones to sample")
    p.add_argument("--per-phone", type=int, default=200)
    p.add_argument("--out")

    p = sub.add_parser("make-synthetic")
    p.add_argument("--out", required=True)
    p.add_argument("--n-phones", type=int, default=5)
    p.add_argument("--n-styles", type=int, default=3)
    p.add_argument("--n-utterances", type=int, default=200)
    p.add_argument("--n-mels", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    return parser


COMMANDS = {
    "prepare": cmd_prepare,
    "train-plcsd": cmd_train_plcsd,
    "train-utterance": cmd_train_utterance,
    "train-predictor": cmd_train_predictor,
    "reconstruct": lambda run, args: _generate(run, args, "reconstruct"),
    "transfer": lambda run, args: _generate(run, args, "transfer"),
    "tts": lambda run, args: _generate(run, args, "tts"),
    "evaluate": cmd_evaluate,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "make-synthetic":
            return cmd_make_synthetic(args)
        run = load_run(args.config, args.set)
        with deterministic_mode(run.config.deterministic):
            return COMMANDS[args.command](run, args)
    except ValidationError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except NumericError as exc:
        log.error("numeric failure in %s: %s", exc.component, exc)
        return EXIT_NUMERIC
    except MissingStageError as exc:
        log.error("%s", exc)
        return EXIT_MISSING_STAGE


if __name__ == "__main__":
    sys.exit(main())
