import asyncio
import itertools
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from app.core.config import RunConfig, SplitKind, dump_config, load_config
from app.core.errors import ConfigError, GradientError, ShapeMismatchError, UnknownUserError
from app.core.logging import configure_logging, get_logger
from app.models.records import FORMAT_PRESETS, BinarizationRule, EdgeSet, FormatSpec, IdMap, RuleKind, SplitSpec
from app.services import datasets
from app.services.gradcheck import TOLERANCE, run_gradcheck
from app.services.model_core import Mode, ModelGraphs, ModelParams, forward, load_checkpoint, save_checkpoint
from app.services.ranking_eval import evaluate, rank_users, write_metrics, write_recommendations
from app.services.signed_graph import SignedBipartiteGraph, build, save_graph_cache
from app.services.synthetic import block_dataset
from app.services.trainer import train, write_training_log

logger = get_logger(__name__)

SWEEPABLE = ("K", "b", "p", "delta", "lambda1", "lambda2", "tau", "H")

CONFIG_FILE = "config.env"
CHECKPOINT_FILE = "checkpoint.bin"
TRAINING_LOG_FILE = "train_log.tsv"
METRICS_FILE = "metrics.json"
RECOMMENDATIONS_FILE = "recommendations.tsv"
GRAPH_CACHE_FILE = "graph.bin"
SWEEP_TABLE_FILE = "sweep.tsv"
CV_TABLE_FILE = "cv.tsv"


def _require(arguments: Dict[str, Any], key: str) -> Any:
    value = arguments.get(key)
    if value is None:
        raise ConfigError(f"missing required argument '{key}'")
    return value


def load_split(config: RunConfig) -> Tuple[EdgeSet, Optional[EdgeSet], int, int]:
    """Training edges, test edges if present, and the id-space sizes"""
    if config.train_path is None:
        raise ConfigError("no training edges configured; set data_dir or train_edges")
    train_edges = datasets.read_edges(config.train_path)
    test_edges = None
    if config.test_path is not None and Path(config.test_path).exists():
        test_edges = datasets.read_edges(config.test_path)

    n_users = n_items = 0
    if config.user_map_path is not None and Path(config.user_map_path).exists():
        n_users = len(datasets.read_id_map(config.user_map_path))
    if config.item_map_path is not None and Path(config.item_map_path).exists():
        n_items = len(datasets.read_id_map(config.item_map_path))
    for edges in (train_edges, test_edges):
        if edges is not None and len(edges):
            n_users = max(n_users, int(edges.users.max()) + 1)
            n_items = max(n_items, int(edges.items.max()) + 1)
    return train_edges, test_edges, n_users, n_items


def eval_embeddings(params: ModelParams, graph: SignedBipartiteGraph, config: RunConfig):
    with torch.no_grad():
        embeddings = forward(
            params.to(torch.float32),
            ModelGraphs.from_graphs(graph, variant=config.variant),
            config.K,
            Mode.EVAL,
            attention_mode=config.attention_mode,
        )
    return embeddings.Z, embeddings.V


def run_training(config: RunConfig) -> Dict[str, Any]:
    """Train, persist checkpoint, log and config, then score the test split if one exists"""
    train_edges, test_edges, n_users, n_items = load_split(config)
    output_dir = Path(config.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, output_dir / CONFIG_FILE)

    validation = None
    if config.early_stopping:
        train_edges, validation = datasets.holdout(train_edges, config.holdout_fraction, config.seed)
    graph = build(train_edges, n_users, n_items)
    save_graph_cache(output_dir / GRAPH_CACHE_FILE, graph)

    result = train(
        graph,
        config.hyper_params(),
        variant=config.variant,
        output_dir=output_dir,
        checkpoint_every=config.checkpoint_every,
        validation=validation,
    )
    save_checkpoint(output_dir / CHECKPOINT_FILE, result.params, n_users, n_items)
    write_training_log(output_dir / TRAINING_LOG_FILE, result.log)

    response: Dict[str, Any] = {
        "status": "success",
        "output_dir": str(output_dir),
        "epochs_run": len(result.log),
        "final_loss": result.log[-1].total if result.log else None,
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
    }
    if test_edges is not None:
        Z, V = eval_embeddings(result.params, graph, config)
        report = _report(Z, V, graph, test_edges, config)
        write_metrics(output_dir / METRICS_FILE, report)
        response["metrics"] = report.flat()
    return response


def _report(Z, V, graph, test_edges, config: RunConfig):
    return evaluate(
        Z,
        V,
        graph,
        test_edges,
        k_list=config.k_list,
        delta=config.ranking_delta,
        filter_mode=config.filter_mode,
        backfill=config.backfill,
        backfilled_as_miss=config.backfilled_as_miss,
        capped_idcg=config.capped_idcg,
    )


def _restore(config: RunConfig, checkpoint_path: Path) -> Tuple[ModelParams, SignedBipartiteGraph, Optional[EdgeSet]]:
    checkpoint = load_checkpoint(checkpoint_path)
    train_edges, test_edges, n_users, n_items = load_split(config)
    if (checkpoint.n_users, checkpoint.n_items) != (n_users, n_items) and n_users <= checkpoint.n_users and n_items <= checkpoint.n_items:
        # id maps absent and the tail ids never occur in the edge files
        n_users, n_items = checkpoint.n_users, checkpoint.n_items
    if (checkpoint.n_users, checkpoint.n_items) != (n_users, n_items):
        raise ShapeMismatchError(
            "checkpoint (users, items)", (n_users, n_items), (checkpoint.n_users, checkpoint.n_items)
        )
    if checkpoint.params.hidden != config.H:
        logger.warning("commands.hidden_size_from_checkpoint", configured=config.H, checkpoint=checkpoint.params.hidden)
    return checkpoint.params, build(train_edges, n_users, n_items), test_edges


def run_sweep_point(fields: Dict[str, Any], log_level: str = "WARNING") -> Dict[str, Any]:
    """Worker entry point; takes plain field values so it pickles cleanly"""
    configure_logging(log_level)
    config = RunConfig(**fields)
    return run_training(config)


class CommandHandler:
    """Route CLI subcommands to the pipeline stages"""

    def __init__(self, config: RunConfig, log_level: str = "INFO"):
        self.config = config
        self.log_level = log_level

    async def handle_command(self, command: str, arguments: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        arguments = arguments or {}
        logger.debug("commands.dispatch", command=command, arguments=sorted(arguments))
        if command == "ingest":
            return self._ingest(arguments)
        elif command == "split":
            return self._split(arguments)
        elif command == "train":
            return self._train(arguments)
        elif command == "evaluate":
            return self._evaluate(arguments)
        elif command == "recommend":
            return self._recommend(arguments)
        elif command == "sweep":
            return await self._sweep(arguments)
        elif command == "cv":
            return await self._cross_validate(arguments)
        elif command == "gradcheck":
            return self._gradcheck(arguments)
        elif command == "synthesize":
            return self._synthesize(arguments)
        else:
            raise ConfigError(f"Unknown command: {command}")

    def _data_dir(self, arguments: Dict[str, Any]) -> Path:
        data_dir = arguments.get("data_dir") or self.config.data_dir
        if data_dir is None:
            raise ConfigError("no data_dir configured")
        return Path(data_dir)

    def _ingest(self, arguments: Dict[str, Any]) -> Dict[str, Any]:
        source = Path(_require(arguments, "input"))
        fmt: FormatSpec = FORMAT_PRESETS[arguments.get("format") or "movielens"]()
        if arguments.get("delimiter"):
            fmt = fmt.model_copy(update={"delimiter": arguments["delimiter"]})
        rule_kind = RuleKind(arguments.get("rule") or RuleKind.STAR_THRESHOLD)
        rule = BinarizationRule(kind=rule_kind, threshold=arguments.get("threshold"))

        log = datasets.load_ratings(source, fmt)
        if arguments.get("min_interactions"):
            log = datasets.filter_min_interactions(log, int(arguments["min_interactions"]))
        edges = datasets.binarize(log, rule)

        data_dir = self._data_dir(arguments)
        datasets.write_edges(data_dir / "edges.tsv", edges)
        datasets.write_id_map(data_dir / "user_ids.tsv", log.user_ids)
        datasets.write_id_map(data_dir / "item_ids.tsv", log.item_ids)
        return {
            "status": "success",
            "data_dir": str(data_dir),
            "users": log.n_users,
            "items": log.n_items,
            "positive_edges": int((edges.signs == 1).sum()),
            "negative_edges": int((edges.signs == -1).sum()),
        }

    def _split(self, arguments: Dict[str, Any]) -> Dict[str, Any]:
        data_dir = self._data_dir(arguments)
        edges = datasets.read_edges(arguments.get("edges") or data_dir / "edges.tsv")
        spec = SplitSpec(
            kind=self.config.split_kind,
            folds=self.config.folds,
            fold_index=self.config.fold_index,
            seed=self.config.seed,
            test_path=self.config.test_edges,
        )
        train_edges, test_edges = datasets.split(edges, spec)
        datasets.write_edges(data_dir / "train.tsv", train_edges)
        if self.config.test_edges is None or Path(self.config.test_edges) != data_dir / "test.tsv":
            datasets.write_edges(data_dir / "test.tsv", test_edges)
        return {"status": "success", "train": len(train_edges), "test": len(test_edges)}

    def _train(self, arguments: Dict[str, Any]) -> Dict[str, Any]:
        return run_training(self.config)

    def _evaluate(self, arguments: Dict[str, Any]) -> Dict[str, Any]:
        checkpoint = Path(arguments.get("checkpoint") or Path(self.config.output_dir) / CHECKPOINT_FILE)
        params, graph, test_edges = _restore(self.config, checkpoint)
        if test_edges is None:
            raise ConfigError("no test edges found; set data_dir or test_edges")
        Z, V = eval_embeddings(params, graph, self.config)
        report = _report(Z, V, graph, test_edges, self.config)
        path = write_metrics(Path(arguments.get("out") or Path(self.config.output_dir) / METRICS_FILE), report)
        return {"status": "success", "report": str(path), "metrics": report.flat()}

    def _resolve_users(self, raw_users: Sequence[str], n_users: int) -> List[int]:
        map_path = self.config.user_map_path
        if map_path is not None and Path(map_path).exists():
            id_map: IdMap = datasets.read_id_map(map_path)
            unknown = [u for u in raw_users if u not in id_map]
            if unknown:
                raise UnknownUserError(unknown)
            return [id_map.index(u) for u in raw_users]
        unknown = [u for u in raw_users if not (str(u).isdigit() and int(u) < n_users)]
        if unknown:
            raise UnknownUserError(unknown)
        return [int(u) for u in raw_users]

    def _recommend(self, arguments: Dict[str, Any]) -> Dict[str, Any]:
        checkpoint = Path(arguments.get("checkpoint") or Path(self.config.output_dir) / CHECKPOINT_FILE)
        params, graph, _ = _restore(self.config, checkpoint)
        users = self._resolve_users([str(u) for u in _require(arguments, "users")], graph.n_users)
        k_rec = int(arguments.get("k_rec") or 10)
        if k_rec < 1:
            raise ConfigError(f"k_rec must be >= 1, got {k_rec}")
        Z, V = eval_embeddings(params, graph, self.config)
        lists = rank_users(
            Z,
            V,
            graph,
            users,
            k_rec,
            self.config.ranking_delta,
            self.config.filter_mode,
            self.config.backfill,
        )
        path = write_recommendations(
            Path(arguments.get("out") or Path(self.config.output_dir) / RECOMMENDATIONS_FILE), lists
        )
        backfilled = sum(entry.backfilled for ranked in lists.values() for entry in ranked.items)
        return {"status": "success", "recommendations": str(path), "users": len(lists), "backfilled": backfilled}

    def _grid_points(self, grid: Dict[str, Sequence[Any]]) -> List[Dict[str, Any]]:
        unknown = sorted(set(grid) - set(SWEEPABLE))
        if unknown:
            raise ConfigError(f"cannot sweep {unknown}; sweepable keys are {list(SWEEPABLE)}")
        if not grid:
            return []
        keys = sorted(grid)
        return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]

    async def _sweep(self, arguments: Dict[str, Any]) -> Dict[str, Any]:
        """Train and evaluate every grid point; failures are recorded, not raised"""
        grid: Dict[str, Sequence[Any]] = arguments.get("grid") or {}
        batch_mode = arguments.get("batch_mode", "parallel")
        points = self._grid_points(grid)
        base = Path(self.config.output_dir)
        configs = []
        for index, point in enumerate(points):
            try:
                configs.append(
                    load_config(None, **{**self.config.model_dump(), **point, "output_dir": base / f"point_{index:03d}"})
                )
            except ConfigError as e:
                configs.append(e)

        outcomes = await self._run_all(configs, batch_mode, arguments.get("workers"))

        rows = []
        summary = {"total": len(points), "successful": 0, "failed": 0}
        for point, outcome in zip(points, outcomes):
            if isinstance(outcome, Exception):
                logger.warning("commands.sweep_point_failed", point=point, error=str(outcome))
                rows.append({**point, "status": "error", "error": f"{type(outcome).__name__}: {outcome}"})
                summary["failed"] += 1
            else:
                rows.append({**point, "status": "success", **outcome.get("metrics", {})})
                summary["successful"] += 1
        table = write_sweep_table(Path(arguments.get("out") or base / SWEEP_TABLE_FILE), rows)
        return {"status": "success", "table": str(table), "summary": summary}

    async def _run_all(self, configs: List[Any], batch_mode: str, workers: Optional[int]) -> List[Any]:
        """run_training per config; entries that are already exceptions pass through as failures"""
        if batch_mode == "parallel" and configs:
            loop = asyncio.get_running_loop()
            with ProcessPoolExecutor(max_workers=workers) as pool:
                return await asyncio.gather(
                    *[
                        self._failed(c) if isinstance(c, Exception)
                        else loop.run_in_executor(pool, run_sweep_point, c.model_dump(), self.log_level)
                        for c in configs
                    ],
                    return_exceptions=True,
                )
        outcomes = []
        for c in configs:
            if isinstance(c, Exception):
                outcomes.append(c)
                continue
            try:
                outcomes.append(run_training(c))
            except Exception as e:
                outcomes.append(e)
        return outcomes

    async def _cross_validate(self, arguments: Dict[str, Any]) -> Dict[str, Any]:
        """Split edges.tsv into every fold, train each, and aggregate metrics as mean and std"""
        data_dir = self._data_dir(arguments)
        edges = datasets.read_edges(arguments.get("edges") or data_dir / "edges.tsv")
        base = Path(self.config.output_dir)
        configs: List[Any] = []
        for fold in range(self.config.folds):
            fold_dir = base / f"fold_{fold}"
            spec = SplitSpec(kind=SplitKind.K_FOLD, folds=self.config.folds, fold_index=fold, seed=self.config.seed)
            train_edges, test_edges = datasets.split(edges, spec)
            datasets.write_edges(fold_dir / "train.tsv", train_edges)
            datasets.write_edges(fold_dir / "test.tsv", test_edges)
            configs.append(
                load_config(
                    None,
                    **{
                        **self.config.model_dump(),
                        "split_kind": SplitKind.K_FOLD,
                        "fold_index": fold,
                        "train_edges": fold_dir / "train.tsv",
                        "test_edges": fold_dir / "test.tsv",
                        "output_dir": fold_dir,
                    },
                )
            )
        outcomes = await self._run_all(configs, arguments.get("batch_mode", "parallel"), arguments.get("workers"))

        rows: List[Dict[str, Any]] = []
        per_fold: List[Dict[str, float]] = []
        for fold, outcome in enumerate(outcomes):
            if isinstance(outcome, Exception):
                logger.warning("commands.cv_fold_failed", fold=fold, error=str(outcome))
                rows.append({"fold": fold, "status": "error", "error": f"{type(outcome).__name__}: {outcome}"})
            else:
                metrics = outcome.get("metrics", {})
                per_fold.append(metrics)
                rows.append({"fold": fold, "status": "success", **metrics})

        mean, std = aggregate_folds(per_fold)
        if per_fold:
            rows.append({"fold": "mean", "status": "success", **mean})
            rows.append({"fold": "std", "status": "success", **std})
        table = write_sweep_table(Path(arguments.get("out") or base / CV_TABLE_FILE), rows)
        logger.info("commands.cv_finished", folds=len(outcomes), successful=len(per_fold))
        return {
            "status": "success",
            "table": str(table),
            "summary": {"total": len(outcomes), "successful": len(per_fold), "failed": len(outcomes) - len(per_fold)},
            "mean": mean,
            "std": std,
        }

    @staticmethod
    async def _failed(error: Exception):
        raise error

    def _gradcheck(self, arguments: Dict[str, Any]) -> Dict[str, Any]:
        report = run_gradcheck(n_configs=int(arguments.get("configs") or 20), seed=int(arguments.get("seed") or 0))
        response = {
            "status": "success" if report.passed else "failed",
            "max_rel_error": report.max_rel_error,
            "max_unfloored_rel_error": report.max_unfloored_rel_error,
            "checked": report.checked,
            "kinked": report.kinked,
        }
        if not report.passed:
            worst = max(report.results, key=lambda r: r.max_rel_error)
            raise GradientError(
                f"max relative error {report.max_rel_error:.3e} >= {TOLERANCE:.0e} (seed {worst.seed}, at {worst.worst})"
            )
        return response

    def _synthesize(self, arguments: Dict[str, Any]) -> Dict[str, Any]:
        data_dir = self._data_dir(arguments)
        dataset = block_dataset(
            n_users=int(arguments.get("users") or 200),
            n_items=int(arguments.get("items") or 400),
            blocks=int(arguments.get("blocks") or 2),
            seed=self.config.seed,
        )
        datasets.write_edges(data_dir / "train.tsv", dataset.train)
        datasets.write_edges(data_dir / "test.tsv", dataset.test)
        return {
            "status": "success",
            "data_dir": str(data_dir),
            "train": len(dataset.train),
            "test": len(dataset.test),
        }


def aggregate_folds(per_fold: Sequence[Dict[str, float]]) -> Tuple[Dict[str, float], Dict[str, float]]:
    """Mean and population std of every metric over folds"""
    if not per_fold:
        return {}, {}
    keys = [key for key in per_fold[0] if all(key in fold for fold in per_fold)]
    mean: Dict[str, float] = {}
    std: Dict[str, float] = {}
    for key in keys:
        values = np.array([float(fold[key]) for fold in per_fold])
        mean[key] = float(values.mean())
        std[key] = float(values.std())
    return mean, std


def write_sweep_table(path: Path, rows: List[Dict[str, Any]]) -> Path:
    """Tab-separated, one row per grid point; columns in first-seen order"""
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: List[str] = []
    for row in rows:
        columns += [key for key in row if key not in columns]
    lines = []
    if rows:
        lines.append("\t".join(columns))
        lines += ["\t".join(str(row.get(c, "")) for c in columns) for row in rows]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path
