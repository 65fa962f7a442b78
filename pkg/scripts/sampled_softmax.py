"""Full softmax vs sampled softmax at several sample sizes."""

from _common import base_parser, dump, fit, load_task, model_config, train_config


def main():
    p = base_parser(__doc__)
    p.add_argument("--sizes", default="50,20,10", help="negatives per position")
    args = p.parse_args()
    _, tr, va, te = load_task(args)
    n = args.num_items + 1
    out = {"full": fit("full softmax", model_config(args, n), train_config(args), tr, va, te)}
    for s in (int(x) for x in args.sizes.split(",")):
        mc = model_config(args, n, output_mode="sampled_softmax", sample_size=s)
        out[f"sampled_{s}"] = fit(f"sampled softmax s={s}", mc, train_config(args), tr, va, te)
        print(f"  |MRR@5 gap| = {abs(out[f'sampled_{s}']['mrr5'] - out['full']['mrr5']):.4f}")
    dump(args, out)


if __name__ == "__main__":
    main()
