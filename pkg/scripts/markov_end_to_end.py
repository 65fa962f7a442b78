"""Train on synthetic Markov sessions and compare against the Bayes oracle and MostPop."""

from _common import base_parser, dump, fit, load_task, model_config, reference_scores, train_config


def main():
    p = base_parser(__doc__)
    p.add_argument("--dilations", default="1,2,4")
    args = p.parse_args()
    d, tr, va, te = load_task(args)
    n = args.num_items + 1
    ref = reference_scores(d, tr, te, n)
    print(f"Bayes MRR@5 {ref['bayes_mrr5']:.4f}   MostPop MRR@5 {ref['mostpop_mrr5']:.4f}")
    dil = tuple(int(x) for x in args.dilations.split(","))
    res = fit("nextitnet", model_config(args, n, dilations=dil), train_config(args), tr, va, te)
    print(f"fraction of Bayes: {res['mrr5'] / ref['bayes_mrr5']:.3f}   multiple of MostPop: {res['mrr5'] / ref['mostpop_mrr5']:.1f}")
    dump(args, {"reference": ref, "model": res})


if __name__ == "__main__":
    main()
