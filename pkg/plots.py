import logging
import os

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

# CONFIG
SMOOTHING_WINDOW = 25


def plot_loss_curves(log_path, out_path, columns):
    """One panel per loss column of a training TSV, raw values plus a rolling mean."""
    df = pd.read_csv(log_path, sep='\t')
    columns = [c for c in columns if c in df.columns]
    if df.empty or not columns:
        logging.warning(f"Nothing to plot in {log_path}")
        return None

    fig, axes = plt.subplots(len(columns), 1, figsize=(10, 2.2 * len(columns)), sharex=True, squeeze=False)
    for ax, col in zip(axes[:, 0], columns):
        ax.plot(df['step'], df[col], color='gray', alpha=0.3, linewidth=0.8)
        ax.plot(df['step'], df[col].rolling(SMOOTHING_WINDOW, min_periods=1).mean(), linewidth=1.4)
        ax.set_ylabel(col)
        ax.grid(True, alpha=0.2)
        # Scale boundaries
        if 'scale' in df.columns:
            for step in df['step'][df['scale'].diff().fillna(0) > 0]:
                ax.axvline(step, color='black', linestyle='--', alpha=0.4)
    axes[-1, 0].set_xlabel('step')
    plt.tight_layout()

    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    plt.savefig(out_path)
    plt.close(fig)
    logging.info(f"Loss curves saved to: {out_path}")
    return out_path


def token_usage_table(sequences, codebook_size):
    """Token counts per frame position: rows are tokens, columns are frames."""
    length = max(len(s.tokens) for s in sequences)
    counts = np.zeros((codebook_size, length), dtype=np.int64)
    for seq in sequences:
        tokens = np.asarray(seq.tokens, dtype=np.int64)
        counts[tokens, np.arange(len(tokens))] += 1
    return pd.DataFrame(counts, index=[f"c{i}" for i in range(codebook_size)],
                        columns=list(range(length)))


def plot_token_usage(sequences, codebook_size, out_path):
    if not sequences:
        return None
    table = token_usage_table(sequences, codebook_size)

    plt.figure(figsize=(12, 6))
    sns.heatmap(table, cmap="viridis", linewidths=0)
    plt.title("Token usage per frame position")
    plt.xlabel("Frame")
    plt.ylabel("Token")
    plt.tight_layout()

    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    plt.savefig(out_path)
    plt.close()
    logging.info(f"Token usage heatmap saved to: {out_path}")
    return out_path
