import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset, Sampler

from containers import load_tensor, read_token_sequence
from errors import DatasetError

# CONFIG
STEP_SEED_STRIDE = 1_000_003


def step_seed(seed, step, stream=0):
    return (int(seed) * STEP_SEED_STRIDE + int(step)) * 4 + stream


def step_generator(seed, step, stream=0):
    return torch.Generator().manual_seed(step_seed(seed, step, stream))


class StepBatchSampler(Sampler):
    """Yields one list of indices per global step in [start_step, end_step)."""

    def __init__(self, n_items, batch_size, seed, start_step, end_step):
        if n_items == 0:
            raise DatasetError("Cannot sample batches from an empty dataset.")
        self.n_items = n_items
        self.batch_size = batch_size
        self.seed = seed
        self.start_step = start_step
        self.end_step = end_step

    def __iter__(self):
        for step in range(self.start_step, self.end_step):
            generator = step_generator(self.seed, step, stream=0)
            yield torch.randint(0, self.n_items, (self.batch_size,), generator=generator).tolist()

    def __len__(self):
        return max(0, self.end_step - self.start_step)


class CqtDataset(Dataset):
    def __init__(self, layout, manifest):
        self.paths = [layout.cqt_path(sid) for sid in manifest.source_ids]

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, index):
        grid = load_tensor(self.paths[index], mmap=True)[0]
        return torch.from_numpy(np.array(grid))


class PyramidDataset(Dataset):
    """
    (spectrogram at one scale, pitch class, token sequence) per training clip.
    Token files are required for every clip.
    """

    def __init__(self, layout, manifest, labels, scale_index):
        self.layout = layout
        self.scale_index = scale_index
        self.source_ids = manifest.source_ids
        self.pitch_classes = [labels.pitch_index(p) for p in manifest.entries['pitch']]
        self.tokens = []
        for sid in self.source_ids:
            path = layout.token_path(sid)
            try:
                self.tokens.append(read_token_sequence(path).tokens.astype(np.int64))
            except FileNotFoundError:
                raise DatasetError(f"No token file for clip '{sid}' ({path}); run 'encode' first.")

    def __len__(self):
        return len(self.source_ids)

    def __getitem__(self, index):
        spec = load_tensor(self.layout.stft_path(self.scale_index, self.source_ids[index]), mmap=True)
        return (torch.from_numpy(np.array(spec)),
                torch.tensor(self.pitch_classes[index]),
                torch.from_numpy(self.tokens[index]))


def step_loader(dataset, batch_size, seed, start_step, end_step, workers=0):
    sampler = StepBatchSampler(len(dataset), batch_size, seed, start_step, end_step)
    # DataLoader keeps batch order even with workers
    return DataLoader(dataset, batch_sampler=sampler, num_workers=workers)
