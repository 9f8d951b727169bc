import json
import logging
import os
import tempfile
from dataclasses import dataclass, field

import pandas as pd
from sklearn.model_selection import train_test_split

from errors import DatasetError

# CONFIG
MANIFEST_COLUMNS = ['source_id', 'path', 'pitch', 'family']
NSYNTH_INDEX = 'examples.json'
NSYNTH_AUDIO_DIR = 'audio'


@dataclass
class DatasetManifest:
    entries: pd.DataFrame
    split_tag: str = 'all'

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return self.entries.itertuples(index=False)

    @property
    def source_ids(self):
        return self.entries['source_id'].tolist()

    def subset(self, source_ids, split_tag=None):
        mask = self.entries['source_id'].isin(set(source_ids))
        return DatasetManifest(self.entries[mask].reset_index(drop=True), split_tag or self.split_tag)


def make_manifest(rows, split_tag='all'):
    df = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    df['pitch'] = df['pitch'].astype(int)
    df['source_id'] = df['source_id'].astype(str)
    df['family'] = df['family'].astype(str)
    return DatasetManifest(df.reset_index(drop=True), split_tag)


# ==========================================
# TSV I/O
# ==========================================

def write_manifest(manifest, path):
    """Headerless UTF-8 TSV, one entry per line, written atomically."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, suffix='.tmp')
    os.close(fd)
    try:
        manifest.entries[MANIFEST_COLUMNS].to_csv(tmp_path, sep='\t', header=False, index=False,
                                                  encoding='utf-8', lineterminator='\n')
        os.replace(tmp_path, path)
    finally:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)


def read_manifest(path, split_tag=None):
    if not os.path.exists(path):
        raise DatasetError(f"Manifest not found: {path}")
    if os.path.getsize(path) == 0:
        return make_manifest([], split_tag or 'all')
    df = pd.read_csv(path, sep='\t', header=None, names=MANIFEST_COLUMNS,
                     dtype={'source_id': str, 'path': str, 'pitch': int, 'family': str},
                     keep_default_na=False)
    if split_tag is None:
        split_tag = os.path.splitext(os.path.basename(path))[0]
    return DatasetManifest(df, split_tag)


# ==========================================
# NSYNTH-FORMAT INGESTION
# ==========================================

def scan_nsynth(root):
    """
    Builds a manifest from an NSynth-format directory: `examples.json` keyed by
    note id, with audio in `audio/<note id>.wav`.
    """
    index_path = os.path.join(root, NSYNTH_INDEX)
    if not os.path.exists(index_path):
        raise DatasetError(f"No {NSYNTH_INDEX} found in '{root}'.")

    with open(index_path, encoding='utf-8') as f:
        index = json.load(f)

    rows = []
    missing = 0
    for note_id, meta in sorted(index.items()):
        wav_path = os.path.join(root, NSYNTH_AUDIO_DIR, f"{note_id}.wav")
        if not os.path.exists(wav_path):
            missing += 1
            continue
        family = meta.get('instrument_family_str', str(meta.get('instrument_family', 'unknown')))
        rows.append((note_id, wav_path, int(meta['pitch']), family))

    if missing:
        logging.warning(f"{missing} entries in {index_path} have no audio file and were skipped.")
    logging.info(f"Scanned {len(rows)} clips from {root}.")
    return make_manifest(rows)


# ==========================================
# FILTER & SPLIT
# ==========================================

def filter_dataset(manifest, pitch_min, pitch_max):
    if pitch_min > pitch_max:
        raise DatasetError(f"Empty pitch range [{pitch_min}, {pitch_max}].")
    df = manifest.entries
    kept = df[(df['pitch'] >= pitch_min) & (df['pitch'] <= pitch_max)].reset_index(drop=True)
    if kept.empty:
        raise DatasetError(f"No entries with pitch in [{pitch_min}, {pitch_max}].")
    logging.info(f"Pitch filter [{pitch_min}, {pitch_max}] kept {len(kept)}/{len(df)} clips "
                 f"({kept['pitch'].nunique()} distinct pitches).")
    return DatasetManifest(kept, manifest.split_tag)


def split_dataset(manifest, train_fraction, seed):
    """Deterministic, disjoint and exhaustive train/test split."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(manifest) == 0:
        raise DatasetError("Cannot split an empty manifest.")
    if len(manifest) == 1:
        raise DatasetError("Cannot split a single-entry manifest into train and test.")

    ordered = manifest.entries.sort_values('source_id').reset_index(drop=True)
    train_df, test_df = train_test_split(ordered, train_size=train_fraction, random_state=seed, shuffle=True)
    train_df = train_df.sort_values('source_id').reset_index(drop=True)
    test_df = test_df.sort_values('source_id').reset_index(drop=True)
    return DatasetManifest(train_df, 'train'), DatasetManifest(test_df, 'test')


# ==========================================
# LABEL SPACE
# ==========================================

@dataclass
class LabelSpace:
    """Class vocabularies shared by the GAN conditioning and the inception classifier."""
    pitches: list = field(default_factory=list)
    families: list = field(default_factory=list)

    @property
    def n_pitches(self):
        return len(self.pitches)

    @property
    def n_families(self):
        return len(self.families)

    def pitch_index(self, pitch):
        try:
            return self.pitches.index(int(pitch))
        except ValueError:
            raise DatasetError(f"Pitch {pitch} is outside the trained pitch set {self.pitches[0]}..{self.pitches[-1]}.")

    def family_index(self, family):
        try:
            return self.families.index(str(family))
        except ValueError:
            raise DatasetError(f"Unknown instrument family '{family}'.")

    def to_dict(self):
        return {'pitches': list(self.pitches), 'families': list(self.families)}

    @classmethod
    def from_dict(cls, data):
        return cls([int(p) for p in data['pitches']], [str(f) for f in data['families']])

    @classmethod
    def from_manifest(cls, manifest, pitch_min=None, n_pitches=0):
        if n_pitches > 0:
            start = pitch_min if pitch_min is not None else int(manifest.entries['pitch'].min())
            pitches = list(range(start, start + n_pitches))
        else:
            pitches = sorted(int(p) for p in manifest.entries['pitch'].unique())
        families = sorted(str(f) for f in manifest.entries['family'].unique())
        return cls(pitches, families)
