"""End to end on the synthetic corpus: baseline versus the split permutation-free model.

Stages, in order:
  1. render the corpus described in desk.json;
  2. pretrain a single-output recognizer on clean single-speaker utterances;
  3. score that model on mixtures by duplicating its one hypothesis;
  4. copy it into a two-branch model and train on mixtures with the
     permutation-free objective;
  5. retrain briefly with the hidden-vector contrast term;
  6. print a CER table (high / low energy speaker and average).

Run: python demos/desk_experiment.py [--config demos/desk.json] [--quick]
"""

import argparse
import logging
import time
from pathlib import Path

from permfree.config import load_config
from permfree.decode import evaluate
from permfree.mixture import build_corpus
from permfree.trainer import Example, TrainData, mean_hidden_kl, train

HERE = Path(__file__).resolve().parent


def examples(corpus, split):
    single = [Example(u.features, [u.labels], u.id) for u in corpus[split]["single"]]
    mixed = [Example(m.features, [list(r) for r in m.refs], m.id) for m in corpus[split]["mixed"]]
    return single, mixed


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", default=HERE / "desk.json")
    ap.add_argument("--quick", action="store_true", help="a few hundred examples and short stages")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)
    if args.quick:
        cfg.data.n_train, cfg.data.n_dev, cfg.data.n_eval = 300, 40, 40
        for s in cfg.train.stages:
            s["epochs"] = min(s["epochs"], 3)
    corpus = build_corpus(cfg.corpus_spec())
    tr_s, tr_m = examples(corpus, "train")
    dv_s, dv_m = examples(corpus, "dev")
    _, ev_m = examples(corpus, "eval")
    data = TrainData(tr_s, dv_s, tr_m, dv_m)
    print(f"corpus: {len(tr_m)} train / {len(dv_m)} dev / {len(ev_m)} eval mixtures")

    schedule = cfg.schedule()
    stages = {s.name: s for s in schedule.stages}
    dcfg = cfg.decode_config()
    eval_set = [(e.features, e.refs) for e in ev_m]
    t0 = time.process_time()

    schedule.stages = [stages["pretrain_single"]]
    pre = train(schedule, data, cfg.model_config())
    baseline, _ = evaluate(pre.store, pre.cfg, eval_set, dcfg)

    schedule.stages = [stages["multi_speaker"]]
    multi = train(schedule, data, cfg.model_config(), store=pre.store, single_cfg=pre.cfg)
    split, _ = evaluate(multi.store, multi.cfg, eval_set, dcfg)
    minutes = (time.process_time() - t0) / 60

    kl_before = mean_hidden_kl(multi.store, multi.cfg, dv_m)
    rows = [("no split (dup.)", baseline), ("split-blstm", split)]
    if "kl_retrain" in stages:
        schedule.stages = [stages["kl_retrain"]]
        kl = train(schedule, data, cfg.model_config(), store=multi.store.copy(), single_cfg=multi.cfg)
        retrained, _ = evaluate(kl.store, kl.cfg, eval_set, dcfg)
        rows.append(("+ KL retrain", retrained))
        print(f"dev symmetric KL between the two hidden streams: {kl_before:.4f} -> "
              f"{mean_hidden_kl(kl.store, kl.cfg, dv_m):.4f}")

    print(f"\ntraining CPU time up to the split model: {minutes:.1f} min\n")
    print(rows[0][1].table(rows[0][0]).splitlines()[0])
    for label, score in rows:
        print(score.table(label).splitlines()[1])
    rel = 1 - split.average / baseline.average
    print(f"\nrelative CER reduction from splitting: {rel:.1%}")


if __name__ == "__main__":
    main()
