"""Corpus manifests, database-variant trees, identification sweeps, reports.

A corpus lives in one directory with a manifest at its root naming each
speaker's training and test files. Variant trees (orig/nb/bwe/...) mirror
that layout so the same manifest drives every condition. run_sweep enrolls
and scores every (variant, P, frame) cell; emit_report writes the delimited
results plus table, gnuplot and rendered-figure views of the rate-vs-P
curves.
"""

import configparser
import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import read_wav, wav_duration_s, write_wav
from .bwe import VARIANTS, BweModel, make_variants
from .features import FeatureMatrix, FrameConfig, extract_features
from .speaker_id import enroll, identify

MANIFEST_NAME = "corpus.manifest"
STATE_NAME = ".variants.json"

TRAIN_TARGET_S = 60.0
TEST_TARGET_S = 2.0
DURATION_SLACK = 0.20


class ManifestError(Exception):
    """Malformed or inconsistent corpus manifest."""


@dataclass
class SpeakerEntry:
    speaker_id: str
    train_files: list
    test_files: list


@dataclass
class CorpusManifest:
    speakers: list
    source_rate_hz: int
    root: Path = None

    def all_files(self):
        for speaker in self.speakers:
            for rel in speaker.train_files + speaker.test_files:
                yield speaker, rel


def parse_manifest(path) -> CorpusManifest:
    """Read the key-value manifest; see synthetic.generate_corpus for the format."""
    path = Path(path)
    parser = configparser.ConfigParser(delimiters=("=",), interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    if "corpus" not in parser:
        raise ManifestError(f"{path}: missing [corpus] section")
    try:
        rate = parser.getint("corpus", "source_rate_hz")
    except (ValueError, configparser.NoOptionError) as exc:
        raise ManifestError(f"{path}: bad or missing source_rate_hz") from exc
    speakers = []
    for section in parser.sections():
        if not section.startswith("speaker:"):
            continue
        ident = section.split(":", 1)[1]
        train = parser.get(section, "train", fallback="").split()
        test = parser.get(section, "test", fallback="").split()
        speakers.append(SpeakerEntry(ident, train, test))
    manifest = CorpusManifest(speakers, rate, root=path.parent)
    _check_structure(manifest)
    return manifest


def _check_structure(manifest: CorpusManifest) -> None:
    if len(manifest.speakers) < 2:
        raise ManifestError("a corpus needs at least 2 speakers")
    seen_train, seen_test = set(), set()
    for speaker in manifest.speakers:
        if not speaker.train_files or not speaker.test_files:
            raise ManifestError(f"speaker {speaker.speaker_id}: empty train or test list")
        seen_train.update(speaker.train_files)
        seen_test.update(speaker.test_files)
    overlap = seen_train & seen_test
    if overlap:
        raise ManifestError(f"files listed for both training and test: {sorted(overlap)[:3]}")


def validate_durations(manifest: CorpusManifest, root=None,
                       train_target_s: float = TRAIN_TARGET_S,
                       test_target_s: float = TEST_TARGET_S) -> None:
    """Check per-speaker material against the protocol durations (+-20%)."""
    root = Path(root) if root is not None else manifest.root
    for speaker in manifest.speakers:
        total = sum(wav_duration_s(root / rel) for rel in speaker.train_files)
        if not (1 - DURATION_SLACK) * train_target_s <= total <= (1 + DURATION_SLACK) * train_target_s:
            raise ManifestError(
                f"speaker {speaker.speaker_id}: {total:.1f} s of training speech"
                f" (expected {train_target_s:.0f} s +-{DURATION_SLACK:.0%})"
            )
        for rel in speaker.test_files:
            dur = wav_duration_s(root / rel)
            if not (1 - DURATION_SLACK) * test_target_s <= dur <= (1 + DURATION_SLACK) * test_target_s:
                raise ManifestError(
                    f"test file {rel}: {dur:.2f} s"
                    f" (expected {test_target_s:.0f} s +-{DURATION_SLACK:.0%})"
                )


# ---------------------------------------------------------------------------
# Variant materialization.

def _sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def build_database_variants(manifest: CorpusManifest, variants, out_root,
                            source_root=None, model: BweModel = None,
                            model_tag: str = "") -> int:
    """Write one tree per variant mirroring the manifest; returns the number
    of files (re)written. Outputs whose inputs did not change are skipped."""
    source_root = Path(source_root) if source_root is not None else manifest.root
    out_root = Path(out_root)
    for variant in variants:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
    state_path = out_root / STATE_NAME
    state = {}
    if state_path.exists():
        state = json.loads(state_path.read_text())
    written = 0
    for speaker, rel in manifest.all_files():
        src = source_root / rel
        if not src.exists():
            raise FileNotFoundError(f"manifest entry missing on disk: {src}")
        input_sha = _sha256_file(src)
        for variant in variants:
            key = f"{variant}/{rel}"
            out_path = out_root / variant / rel
            stamp = {"input_sha256": input_sha, "model": model_tag}
            if state.get(key) == stamp and out_path.exists():
                continue
            buffer = read_wav(src)
            out_path.parent.mkdir(parents=True, exist_ok=True)
            write_wav(make_variants(buffer, variant, model=model), out_path)
            state[key] = stamp
            written += 1
    out_root.mkdir(parents=True, exist_ok=True)
    state_path.write_text(json.dumps(state, indent=0, sort_keys=True))
    return written


# ---------------------------------------------------------------------------
# Sweeps.

@dataclass
class TrialDecision:
    true_speaker: str
    test_file: str
    predicted: str
    correct: bool


@dataclass
class ExperimentResult:
    variant: str
    parameterization: str
    n_params: int
    frame_ms: float
    fft_len: int
    rate: float            # percent; NaN when the cell is invalid
    trials: int
    valid: bool = True
    reason: str = ""
    decisions: list = field(default_factory=list, repr=False)


def identification_rate(decisions) -> float:
    """Percent of trials whose top-ranked speaker is the true one.

    Accepts (true_id, ranked) pairs where ranked is a nonempty list of
    (speaker_id, score) from best to worst.
    """
    decisions = list(decisions)
    if not decisions:
        raise ValueError("no decisions to score")
    correct = sum(1 for true_id, ranked in decisions if ranked[0][0] == true_id)
    return 100.0 * correct / len(decisions)


def _resolved_fft_len(frame_ms: float, fs: int, config: FrameConfig) -> int:
    frame_len = int(round(frame_ms * fs / 1000.0))
    return config.fft_len if config.fft_len else 1 << (frame_len - 1).bit_length()


def _run_cell(manifest, variant, root, parameterization, n_params,
              config: FrameConfig) -> ExperimentResult:
    rate_hz = None
    fft_len = 0
    try:
        models = []
        for speaker in manifest.speakers:
            rows = []
            for rel in speaker.train_files:
                buf = read_wav(Path(root) / rel)
                rate_hz = buf.sample_rate_hz
                rows.append(extract_features(buf, parameterization, n_params, config).vectors)
            features = np.vstack(rows)
            fft_len = _resolved_fft_len(config.frame_ms, rate_hz, config)
            models.append(enroll(FeatureMatrix(features, parameterization), speaker.speaker_id))
        decisions = []
        for speaker in manifest.speakers:
            for rel in speaker.test_files:
                buf = read_wav(Path(root) / rel)
                test = extract_features(buf, parameterization, n_params, config)
                ranked = identify(test, models)
                decisions.append(TrialDecision(
                    speaker.speaker_id, rel, ranked[0][0],
                    ranked[0][0] == speaker.speaker_id))
        rate = 100.0 * sum(d.correct for d in decisions) / len(decisions)
        return ExperimentResult(variant, parameterization, n_params,
                                config.frame_ms, fft_len, rate, len(decisions),
                                decisions=decisions)
    except (ValueError, FileNotFoundError) as exc:
        return ExperimentResult(variant, parameterization, n_params,
                                config.frame_ms, fft_len, float("nan"), 0,
                                valid=False, reason=str(exc))


def run_sweep(manifest: CorpusManifest, variant_roots: dict, parameterization: str,
              p_list, frame_configs, jobs: int = 1) -> list:
    """Enroll and score every (variant, P, frame config) cell.

    Cells are independent; jobs > 1 runs them in a thread pool. The result
    order (and therefore every report) is independent of jobs. Invalid cells
    (e.g. enrollment needs more frames than a P allows) are flagged rather
    than aborting the sweep.
    """
    cells = [
        (variant, n_params, config)
        for variant in variant_roots
        for config in frame_configs
        for n_params in p_list
    ]

    def work(cell):
        variant, n_params, config = cell
        return _run_cell(manifest, variant, variant_roots[variant],
                         parameterization, n_params, config)

    if jobs <= 1:
        return [work(cell) for cell in cells]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(work, cells))


# ---------------------------------------------------------------------------
# Reports.

CSV_HEADER = ["variant", "param", "P", "frame_ms", "fft_len", "rate", "trials"]


def _format_rate(result: ExperimentResult) -> str:
    return "" if not result.valid else f"{result.rate:.10g}"


def write_rates_csv(results, path) -> None:
    """Delimited schema: variant,param,P,frame_ms,fft_len,rate,trials.

    Invalid cells keep their key columns but carry an empty rate and zero
    trials.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in results:
            writer.writerow([r.variant, r.parameterization, r.n_params,
                             f"{r.frame_ms:.10g}", r.fft_len,
                             _format_rate(r), r.trials])


def write_audit_csv(results, path) -> None:
    """One row per identification trial, sufficient to recompute every rate."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "param", "P", "frame_ms", "fft_len",
                         "true_speaker", "test_file", "predicted", "correct"])
        for r in results:
            for d in r.decisions:
                writer.writerow([r.variant, r.parameterization, r.n_params,
                                 f"{r.frame_ms:.10g}", r.fft_len,
                                 d.true_speaker, d.test_file, d.predicted,
                                 int(d.correct)])


def _table_groups(results):
    """Stable orderings: fft lengths descending, variants by first appearance."""
    fft_lens = sorted({r.fft_len for r in results}, reverse=True)
    variants = []
    for r in results:
        if r.variant not in variants:
            variants.append(r.variant)
    p_values = sorted({r.n_params for r in results})
    return fft_lens, variants, p_values


def render_table(results) -> str:
    """Rate table in the frame-length-grouped layout: one row per P, one
    column block per frame length with a column per variant; cells are
    percentages with two decimals and '-' where a cell is missing/invalid."""
    results = list(results)
    fft_lens, variants, p_values = _table_groups(results)
    lookup = {}
    for r in results:
        lookup[(r.n_params, r.fft_len, r.variant)] = r
    lines = []
    head = ["P"]
    for fft in fft_lens:
        head.append(f"Frame length={fft} samples")
        head.extend([""] * (len(variants) - 1))
    lines.append("\t".join(head))
    sub = [""]
    for _ in fft_lens:
        sub.extend(variants)
    lines.append("\t".join(sub))
    for p in p_values:
        row = [str(p)]
        for fft in fft_lens:
            for variant in variants:
                r = lookup.get((p, fft, variant))
                row.append(f"{r.rate:.2f}" if r is not None and r.valid else "-")
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def _plot_data(results):
    """(param, fft_len) -> (variants, p_values, rate matrix with NaN holes)."""
    out = {}
    params = []
    for r in results:
        if r.parameterization not in params:
            params.append(r.parameterization)
    for param in params:
        sub = [r for r in results if r.parameterization == param]
        fft_lens, variants, p_values = _table_groups(sub)
        for fft in fft_lens:
            grid = np.full((len(p_values), len(variants)), np.nan)
            for r in sub:
                if r.fft_len == fft and r.valid:
                    grid[p_values.index(r.n_params), variants.index(r.variant)] = r.rate
            out[(param, fft)] = (variants, p_values, grid)
    return out


def write_plot_script(results, report_dir) -> list:
    """Emit gnuplot-compatible .dat files plus one plot_rates.gp driver."""
    report_dir = Path(report_dir)
    written = []
    script = ["set xlabel 'P'", "set ylabel 'identification rate (%)'",
              "set key bottom right", "set yrange [0:100]", "set grid",
              "set terminal pngcairo size 800,600"]
    for (param, fft), (variants, p_values, grid) in _plot_data(results).items():
        stem = f"rates_{param.lower()}_fft{fft}"
        dat = report_dir / f"{stem}.dat"
        with open(dat, "w") as fh:
            fh.write("# P " + " ".join(variants) + "\n")
            for i, p in enumerate(p_values):
                cells = " ".join("nan" if np.isnan(v) else f"{v:.4f}" for v in grid[i])
                fh.write(f"{p} {cells}\n")
        written.append(dat)
        script.append(f"set output '{stem}.png'")
        plots = ", ".join(
            f"'{stem}.dat' using 1:{j + 2} with linespoints title '{v}'"
            for j, v in enumerate(variants))
        script.append(f"plot {plots}")
    gp = report_dir / "plot_rates.gp"
    gp.write_text("\n".join(script) + "\n")
    written.append(gp)
    return written


def render_figures(results, report_dir) -> list:
    """Render rate-vs-P curves straight to PNG next to the delimited output."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report_dir = Path(report_dir)
    written = []
    for (param, fft), (variants, p_values, grid) in _plot_data(results).items():
        fig, ax = plt.subplots(figsize=(7, 5))
        for j, variant in enumerate(variants):
            ax.plot(p_values, grid[:, j], marker="o", label=variant)
        ax.set_xlabel("P")
        ax.set_ylabel("identification rate (%)")
        ax.set_title(f"{param}, frame length {fft} samples")
        ax.set_ylim(0, 100)
        ax.grid(True, alpha=0.4)
        ax.legend(loc="lower right")
        out = report_dir / f"rates_{param.lower()}_fft{fft}.png"
        fig.savefig(out, dpi=100)
        plt.close(fig)
        written.append(out)
    return written


def emit_report(results, report_dir, formats=("csv", "table", "plot")) -> list:
    """Write the requested report artifacts; returns the paths written."""
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        path = report_dir / "rates.csv"
        write_rates_csv(results, path)
        written.append(path)
    if "table" in formats:
        path = report_dir / "rates_table.txt"
        path.write_text(render_table(results))
        written.append(path)
    if "plot" in formats:
        written.extend(write_plot_script(results, report_dir))
        written.extend(render_figures(results, report_dir))
    return written
