"""Deep stack with and without skip connections."""

from _common import base_parser, dump, fit, load_task, model_config, train_config


def main():
    p = base_parser(__doc__)
    p.set_defaults(epochs=3)
    p.add_argument("--dilations", default="1,2,4,8,1,2,4,8")
    p.add_argument("--variant", default="A", choices=["A", "B"])
    args = p.parse_args()
    _, tr, va, te = load_task(args)
    n = args.num_items + 1
    dil = tuple(int(x) for x in args.dilations.split(","))
    out = {}
    for residual in (True, False):
        mc = model_config(args, n, dilations=dil, residual=residual, block_variant=args.variant)
        out["residual" if residual else "plain"] = fit(
            "with skip" if residual else "without skip", mc, train_config(args, patience=0), tr, va, te
        )
    dump(args, out)


if __name__ == "__main__":
    main()
