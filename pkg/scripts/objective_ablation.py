"""Full-sequence objective vs last-item objective, with and without sub-session augmentation.

Reports cumulative training sequences needed to reach a validation-loss
threshold and the final test MRR@5 of each regime.
"""

from _common import base_parser, dump, fit, load_task, model_config, train_config


def main():
    p = base_parser(__doc__)
    p.add_argument("--threshold", type=float, default=3.35, help="validation loss target (nats)")
    p.add_argument("--eval-every", type=int, default=312, help="steps between validation checks")
    args = p.parse_args()
    _, tr, va, te = load_task(args)
    n = args.num_items + 1
    mc = model_config(args, n)
    curves = {}
    for name, kw in [
        ("full_sequence", dict(objective="full_sequence")),
        ("last_item+augment", dict(objective="last_item", augment=True)),
        ("last_item", dict(objective="last_item")),
    ]:
        cfg = train_config(args, patience=0, eval_every_steps=args.eval_every, target_val_loss=args.threshold, **kw)
        curves[name] = fit(name + " (to target)", mc, cfg, tr, va, te)
        print(f"  sequences to val loss {args.threshold}: {curves[name]['reached_target_at']}")
    finals = {
        name: fit(name, mc, train_config(args, **kw), tr, va, te)
        for name, kw in [("full_sequence", {}), ("last_item", dict(objective="last_item"))]
    }
    dump(args, {"threshold": args.threshold, "convergence": curves, "final": finals})


if __name__ == "__main__":
    main()
