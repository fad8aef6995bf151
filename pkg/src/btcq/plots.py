"""Figure rendering for the CLI report paths.

Uses the Agg backend so figures render to files on headless machines;
every function writes one PNG next to the delimited data it mirrors.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_bench_figure(rows, path) -> None:
    """Kernel timing comparison: one line per kernel across size labels.

    `rows` are (size_label, kernel, median_ns) triples as produced by
    the benchmark runner.
    """
    sizes = list(dict.fromkeys(label for label, _, _ in rows))
    kernels = list(dict.fromkeys(kernel for _, kernel, _ in rows))
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for kernel in kernels:
        byname = {label: ns for label, k, ns in rows if k == kernel}
        ax.plot(
            sizes,
            [byname[s] for s in sizes],
            marker="o",
            label=kernel,
        )
    ax.set_yscale("log")
    ax.set_xlabel("batch x rows x cols")
    ax.set_ylabel("median wall time (ns)")
    ax.set_title("kernel timing")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_trace_figure(rows, path) -> None:
    """Objective trace of a transform fit, colored by optimizer phase.

    `rows` are (step, phase, objective) triples in recorded order.
    """
    steps = [step for step, _, _ in rows]
    values = [value for _, _, value in rows]
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    ax.plot(steps, values, color="0.6", linewidth=1.0)
    for phase in dict.fromkeys(phase for _, phase, _ in rows):
        xs = [step for step, p, _ in rows if p == phase]
        ys = [value for _, p, value in rows if p == phase]
        ax.scatter(xs, ys, s=18, label=phase)
    ax.set_xlabel("accepted step")
    ax.set_ylabel("block objective")
    ax.set_title("transform fit")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
