"""Dataset construction, batch episode execution, and metric tables.

The dataset generator is quota-driven: part counts and kinds are laid out
first (deterministically from the master seed) so the split totals are met
exactly by construction, then one cabinet is generated per plan entry.
Benchmark episodes are independent work items keyed by a stable episode id;
aggregation reduces them in sorted order, so any parallelism degree yields
identical tables and logs.
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import camera, detect, executor, hands, instruct, scene

DATASET_FORMAT = "opend-dataset/1"
SPLITS = ("train", "test")
KINDS = (scene.DRAWER, scene.DOOR)
TABLE_KINDS = (scene.DRAWER, scene.DOOR, "overall")
FAILURE_COLUMNS = (executor.NO_DETECTION, executor.NO_MATCH, executor.NO_GRASP,
                   executor.DETACHED, executor.WRONG_PART, executor.TIMEOUT)


@dataclass(frozen=True)
class DatasetQuota:
    cabinets_train: int = 135
    cabinets_test: int = 39
    drawers_train: int = 138
    drawers_test: int = 29
    doors_train: int = 145
    doors_test: int = 60

    def cabinets(self, split: str) -> int:
        return self.cabinets_train if split == "train" else self.cabinets_test

    def parts(self, split: str, kind: str) -> int:
        return {
            ("train", scene.DRAWER): self.drawers_train,
            ("test", scene.DRAWER): self.drawers_test,
            ("train", scene.DOOR): self.doors_train,
            ("test", scene.DOOR): self.doors_test,
        }[(split, kind)]

    def scaled(self, factor: float) -> "DatasetQuota":
        return DatasetQuota(*(int(getattr(self, f.name) * factor) for f in fields(self)))


@dataclass(frozen=True)
class InstructionRef:
    cabinet_id: int
    part_id: int
    split: str
    kind: str
    text: str


@dataclass
class Dataset:
    cabinets: list[scene.Cabinet]
    instructions: list[InstructionRef]
    master_seed: int
    quota: DatasetQuota

    def cabinet(self, cabinet_id: int) -> scene.Cabinet:
        return self._by_id()[cabinet_id]

    def _by_id(self) -> dict[int, scene.Cabinet]:
        if not hasattr(self, "_index"):
            self._index = {c.id: c for c in self.cabinets}
        return self._index

    def counts(self) -> dict[str, int]:
        out = {"cabinets": len(self.cabinets), "parts": len(self.instructions)}
        for split in SPLITS:
            out[f"cabinets_{split}"] = sum(1 for c in self.cabinets if c.split == split)
        for kind in KINDS:
            refs = [r for r in self.instructions if r.kind == kind]
            out[f"{kind}s"] = len(refs)
            for split in SPLITS:
                out[f"{kind}s_{split}"] = sum(1 for r in refs if r.split == split)
        return out

    def split_instructions(self, split: Optional[str]) -> list[InstructionRef]:
        if split is None:
            return list(self.instructions)
        return [r for r in self.instructions if r.split == split]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for c in self.cabinets:
            h.update(scene.scene_bytes(c))
        for r in self.instructions:
            h.update(f"{r.cabinet_id}\t{r.part_id}\t{r.split}\t{r.text}\n".encode())
        return h.hexdigest()


class GenerationFailed(scene.GenerationFailed):
    pass


def _compose_split(rng, n_cabinets: int, n_drawers: int, n_doors: int) -> list[list[str]]:
    """Assign a part-kind list to each cabinet so split totals are exact."""
    n_parts = n_drawers + n_doors
    if n_parts < n_cabinets:
        raise GenerationFailed(f"{n_parts} parts cannot cover {n_cabinets} cabinets")
    counts = [1] * n_cabinets
    for _ in range(n_parts - n_cabinets):
        open_idx = [i for i, n in enumerate(counts) if n < scene.MAX_PARTS]
        counts[open_idx[int(rng.integers(0, len(open_idx)))]] += 1
    tokens = [scene.DRAWER] * n_drawers + [scene.DOOR] * n_doors
    rng.shuffle(tokens)
    plans, at = [], 0
    for n in counts:
        plans.append(tokens[at:at + n])
        at += n
    return plans


def build_dataset(master_seed: int = 0, quota: DatasetQuota = DatasetQuota(),
                  constraints: scene.GenerationConstraints = scene.GenerationConstraints()) -> Dataset:
    cabinets: list[scene.Cabinet] = []
    instructions: list[InstructionRef] = []
    cab_id = 0
    for split_idx, split in enumerate(SPLITS):
        rng = np.random.default_rng([int(master_seed), 0xDA7A, split_idx])
        plans = _compose_split(rng, quota.cabinets(split),
                               quota.parts(split, scene.DRAWER), quota.parts(split, scene.DOOR))
        for plan in plans:
            con = replace(constraints, kinds=tuple(plan), n_parts=len(plan), grid=None)
            seed = master_seed * 1_000_003 + split_idx * 100_003 + cab_id
            cab = scene.generate_cabinet(seed, con, cabinet_id=cab_id, split=split)
            cabinets.append(cab)
            for ins in instruct.describe_parts(cab):
                instructions.append(InstructionRef(cab_id, ins.part_id, split, ins.kind, ins.text))
            cab_id += 1
    ds = Dataset(cabinets, instructions, master_seed, quota)
    counts = ds.counts()
    for split in SPLITS:
        assert counts[f"cabinets_{split}"] == quota.cabinets(split), counts
        for kind in KINDS:
            assert counts[f"{kind}s_{split}"] == quota.parts(split, kind), counts
    return ds


def save_dataset(ds: Dataset, out_dir) -> None:
    os.makedirs(os.path.join(out_dir, "scenes"), exist_ok=True)
    for c in ds.cabinets:
        scene.save_scene(c, os.path.join(out_dir, "scenes", f"cab_{c.id:04d}.json"))
    with open(os.path.join(out_dir, "instructions.tsv"), "w", encoding="utf-8") as f:
        for r in ds.instructions:
            f.write(f"{r.cabinet_id}\t{r.part_id}\t{r.split}\t{r.kind}\t{r.text}\n")
    manifest = {
        "format": DATASET_FORMAT,
        "master_seed": ds.master_seed,
        "quota": ds.quota.__dict__,
        "counts": ds.counts(),
        "fingerprint": ds.fingerprint(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_dataset(in_dir) -> Dataset:
    with open(os.path.join(in_dir, "manifest.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != DATASET_FORMAT:
        raise scene.ParseError(f"unsupported dataset format {manifest.get('format')!r}", field="format")
    quota = DatasetQuota(**manifest["quota"])
    names = sorted(os.listdir(os.path.join(in_dir, "scenes")))
    cabinets = [scene.load_scene(os.path.join(in_dir, "scenes", n)) for n in names]
    instructions = []
    with open(os.path.join(in_dir, "instructions.tsv"), "r", encoding="utf-8") as f:
        for line in f:
            cab_id, part_id, split, kind, text = line.rstrip("\n").split("\t")
            instructions.append(InstructionRef(int(cab_id), int(part_id), split, kind, text))
    ds = Dataset(cabinets, instructions, int(manifest["master_seed"]), quota)
    if ds.fingerprint() != manifest["fingerprint"]:
        raise scene.ParseError("dataset fingerprint mismatch", field="fingerprint")
    return ds


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRow:
    episodes: int = 0
    successes: int = 0
    ratio_sum: float = 0.0
    failures: dict = field(default_factory=dict)

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0

    @property
    def mean_open_ratio(self) -> float:
        return self.ratio_sum / self.episodes if self.episodes else 0.0


class MetricsTable:
    def __init__(self):
        self.rows: dict[tuple, MetricsRow] = {}

    def _row(self, key) -> MetricsRow:
        if key not in self.rows:
            self.rows[key] = MetricsRow()
        return self.rows[key]

    def add(self, hand: str, detector: str, split: str, kind: str,
            result: executor.EpisodeResult) -> None:
        for k in (kind, "overall"):
            row = self._row((hand, detector, split, k))
            row.episodes += 1
            row.successes += int(result.success)
            row.ratio_sum += result.open_ratio
            if result.failure != executor.NONE:
                row.failures[result.failure] = row.failures.get(result.failure, 0) + 1

    def sorted_keys(self) -> list[tuple]:
        order = {k: i for i, k in enumerate(TABLE_KINDS)}
        return sorted(self.rows, key=lambda k: (k[0], k[1], k[2], order.get(k[3], 99)))

    def rate(self, hand: str, detector: str, split: str, kind: str) -> float:
        return self.rows[(hand, detector, split, kind)].success_rate

    def to_csv(self) -> bytes:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["hand", "detector", "split", "kind", "episodes", "successes",
                    "success_rate", "mean_open_ratio", *FAILURE_COLUMNS])
        for key in self.sorted_keys():
            row = self.rows[key]
            w.writerow([*key, row.episodes, row.successes, repr(row.success_rate),
                        repr(row.mean_open_ratio),
                        *(row.failures.get(f, 0) for f in FAILURE_COLUMNS)])
        return buf.getvalue().encode()

    @staticmethod
    def from_csv(data: bytes) -> "MetricsTable":
        t = MetricsTable()
        reader = csv.DictReader(io.StringIO(data.decode()))
        for rec in reader:
            key = (rec["hand"], rec["detector"], rec["split"], rec["kind"])
            row = t._row(key)
            row.episodes = int(rec["episodes"])
            row.successes = int(rec["successes"])
            row.ratio_sum = float(rec["mean_open_ratio"]) * row.episodes
            row.failures = {f: int(rec[f]) for f in FAILURE_COLUMNS if int(rec[f])}
        return t

    def to_text(self) -> bytes:
        cols = ["hand", "detector", "split", "kind", "n", "succ", "rate", "ratio", *FAILURE_COLUMNS]
        recs = []
        for key in self.sorted_keys():
            row = self.rows[key]
            recs.append([*key, str(row.episodes), str(row.successes),
                         f"{100.0 * row.success_rate:.1f}%", f"{row.mean_open_ratio:.3f}",
                         *(str(row.failures.get(f, 0)) for f in FAILURE_COLUMNS)])
        widths = [max(len(c), *(len(r[i]) for r in recs)) if recs else len(c)
                  for i, c in enumerate(cols)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()]
        lines.append("-" * len(lines[0]))
        for r in recs:
            lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
        return ("\n".join(lines) + "\n").encode()


def report(table: MetricsTable, fmt: str = "text") -> bytes:
    if fmt == "csv":
        return table.to_csv()
    if fmt == "text":
        return table.to_text()
    raise ValueError(f"unknown report format {fmt!r}")


def write_report(table: MetricsTable, out_dir, figures: bool = True) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name, fmt in (("metrics.txt", "text"), ("metrics.csv", "csv")):
        path = os.path.join(out_dir, name)
        with open(path, "wb") as f:
            f.write(report(table, fmt))
        paths.append(path)
    if figures:
        from . import figures as fig

        paths.extend(fig.render_metrics_figures(table, out_dir))
    return paths


# ---------------------------------------------------------------------------
# detector specs (picklable factories for worker processes)


@dataclass(frozen=True)
class DetectorSpec:
    kind: str = "oracle"  # oracle | plugin | gt
    noise: detect.NoiseConfig = detect.NoiseConfig()
    endpoint: Optional[str] = None
    timeout: float = 5.0

    @property
    def label(self) -> str:
        if self.kind == "plugin":
            return f"plugin:{self.endpoint}"
        if self.kind == "oracle" and (self.noise.sigma_px or self.noise.p_miss or self.noise.p_fp):
            return (f"oracle[s={self.noise.sigma_px:g},miss={self.noise.p_miss:g},"
                    f"fp={self.noise.p_fp:g}]")
        return self.kind

    def build(self, seed: int):
        if self.kind == "oracle":
            return detect.OracleDetector(self.noise, seed)
        if self.kind == "plugin":
            return detect.PluginDetector(self.endpoint, self.timeout)
        raise ValueError(f"unknown detector kind {self.kind!r}")

    @staticmethod
    def parse(text: str) -> "DetectorSpec":
        if text.startswith("plugin:"):
            return DetectorSpec("plugin", endpoint=text.split(":", 1)[1])
        if text == "oracle":
            return DetectorSpec("oracle")
        raise ValueError(f"unknown detector spec {text!r}")


@dataclass(frozen=True)
class EpisodeSpec:
    episode_id: str
    cabinet: scene.Cabinet
    part_id: int
    instruction: Optional[str]
    split: str
    kind: str
    hand_kind: str
    seed: int
    protocol: str  # "planner" | "grasp"


def _episode_specs(ds: Dataset, hand_kinds, split: Optional[str], protocol: str) -> list[EpisodeSpec]:
    refs = sorted(ds.split_instructions(split),
                  key=lambda r: (r.cabinet_id, r.part_id))
    specs = []
    for hand_kind in sorted(hand_kinds):
        for i, r in enumerate(refs):
            specs.append(EpisodeSpec(
                episode_id=f"{hand_kind}-{r.cabinet_id:04d}-{r.part_id}",
                cabinet=ds.cabinet(r.cabinet_id),
                part_id=r.part_id,
                instruction=r.text,
                split=r.split,
                kind=r.kind,
                hand_kind=hand_kind,
                seed=ds.master_seed * 1_000_003 + i,
                protocol=protocol,
            ))
    return specs


def _run_one(args) -> tuple[str, dict, list[str]]:
    ep, detector_spec, cfg, want_traj = args
    hand = hands.hand_spec(ep.hand_kind)
    cfg = replace(cfg, seed=ep.seed)
    if ep.protocol == "grasp":
        result = executor.run_grasp_episode(ep.cabinet, ep.part_id, hand, cfg)
        mode = "grasp-eval"
    else:
        detector = detector_spec.build(ep.seed * 4 + 3)
        result = executor.run_episode(ep.cabinet, ep.instruction, hand, detector, cfg)
        mode = "agent"
    lines = []
    if want_traj:
        lines = executor.trajectory_lines(ep.cabinet, result, ep.hand_kind, ep.instruction,
                                          mode, cfg=cfg)
    return ep.episode_id, {"result": result.as_dict(), "split": ep.split, "kind": ep.kind,
                           "hand": ep.hand_kind}, lines


def _execute(specs, detector_spec, cfg, jobs: int, out_dir, detector_label: str) -> MetricsTable:
    traj_dir = None
    if out_dir:
        traj_dir = os.path.join(out_dir, "trajs")
        os.makedirs(traj_dir, exist_ok=True)
    tasks = [(ep, detector_spec, cfg, traj_dir is not None) for ep in specs]
    if jobs <= 1:
        outputs = [_run_one(t) for t in tasks]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_run_one, tasks, chunksize=8))
    outputs.sort(key=lambda o: o[0])
    table = MetricsTable()
    for episode_id, rec, lines in outputs:
        result = executor.EpisodeResult.from_dict(rec["result"])
        table.add(rec["hand"], detector_label, rec["split"], rec["kind"], result)
        if traj_dir and lines:
            with open(os.path.join(traj_dir, f"{episode_id}.traj.jsonl"), "w", encoding="utf-8") as f:
                f.write("\n".join(lines) + "\n")
    return table


def run_benchmark(ds: Dataset, hand_kinds, detector: DetectorSpec = DetectorSpec(),
                  cfg: executor.ExecConfig = executor.ExecConfig(), split: Optional[str] = "test",
                  jobs: int = 1, out_dir=None) -> MetricsTable:
    """One vision-driven episode per (instruction, hand); aggregates a MetricsTable."""
    specs = _episode_specs(ds, hand_kinds, split, "planner")
    return _execute(specs, detector, cfg, jobs, out_dir, detector.label)


def grasp_eval(ds: Dataset, hand_kinds, cfg: executor.ExecConfig = executor.ExecConfig(),
               split: Optional[str] = None, jobs: int = 1, out_dir=None) -> MetricsTable:
    """Ground-truth-position protocol: grasp+pull success per hand and part kind."""
    specs = _episode_specs(ds, hand_kinds, split, "grasp")
    return _execute(specs, None, cfg, jobs, out_dir, "gt")


# ---------------------------------------------------------------------------
# training-image export


def dump_images(ds: Dataset, out_dir, renders_per_cabinet: int = 12,
                split: str = "train") -> int:
    """Write jittered observations plus handle bbox labels for each cabinet."""
    os.makedirs(out_dir, exist_ok=True)
    count = 0
    for c in ds.cabinets:
        if split and c.split != split:
            continue
        for k in range(renders_per_cabinet):
            seed = ds.master_seed * 1_000_003 + c.id * 131 + k
            pose = camera.place_camera(c, seed)
            obs = camera.render(pose, c, seed + 1)
            stem = os.path.join(out_dir, f"cab_{c.id:04d}_{k:02d}")
            camera.save_observation(obs, stem)
            labels = []
            for p in c.parts:
                try:
                    bb = camera.project_bbox(pose, p)
                except (camera.BehindCamera, camera.OutsideFrame):
                    continue
                labels.append({"part_id": p.id, "kind": p.kind, "bbox": bb.as_list()})
            with open(f"{stem}.labels.json", "w", encoding="utf-8") as f:
                json.dump({"labels": labels}, f, indent=1, sort_keys=True)
            count += 1
    return count
