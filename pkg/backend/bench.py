import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional

import numpy as np
from autodiff import Tensor
from backbone import backbone_forward
from config import debug_print
from model_store import ModelBundle
from models import BenchReport
from recurrent import stack_forward
from tqdm import tqdm

FRAME_POOL = 8  # Distinct synthetic frames cycled through the timed loop


def _synthetic_frames(bundle: ModelBundle, seed: int) -> List[Tensor]:
    backbone = bundle.config.backbone
    rng = np.random.default_rng(seed)
    shape = (backbone.input_height, backbone.input_width, backbone.input_channels)
    return [Tensor(rng.random(shape), dtype=bundle.dtype) for _ in range(FRAME_POOL)]


def _time_backbone(
    bundle: ModelBundle,
    frames: List[Tensor],
    count: int,
    threads: int,
    clock: Callable[[], float],
    quiet: bool,
) -> float:
    def run(i: int) -> None:
        backbone_forward(frames[i % len(frames)], bundle.backbone)

    if threads == 1:
        show_bar = not quiet and sys.stdout.isatty()
        start = clock()
        for i in tqdm(range(count), desc="bench", disable=not show_bar):
            run(i)
        return clock() - start

    with ThreadPoolExecutor(max_workers=threads) as pool:
        start = clock()
        list(pool.map(run, range(count)))
        return clock() - start


def bench(
    bundle: ModelBundle,
    warmup: int = 50,
    timed: int = 500,
    threads: int = 1,
    seed: int = 0,
    clock: Optional[Callable[[], float]] = None,
    quiet: bool = True,
) -> BenchReport:
    """
    Measure seconds per frame of the recognition pipeline.

    Each timed frame costs one backbone pass plus 1/T of a recurrent stack
    pass over a T-step feature sequence, so a window's sequence model is
    amortized over its frames. Warmup passes run first and are not timed.

    Args:
        threads: 1 for the sequential loop, more to spread frames over a
            thread pool (wall clock of the whole batch)
        clock: monotonic time source, `time.perf_counter` by default
    """
    if timed < 1:
        raise ValueError("timed must be at least 1")
    if warmup < 0:
        raise ValueError("warmup must not be negative")
    if threads < 1:
        raise ValueError("threads must be at least 1")
    clock = clock or time.perf_counter

    frames = _synthetic_frames(bundle, seed)
    steps = bundle.config.recurrent.sequence_length
    features = Tensor(
        np.random.default_rng(seed + 1).random(
            (steps, bundle.config.backbone.feature_size)
        ),
        dtype=bundle.dtype,
    )

    for i in range(warmup):
        backbone_forward(frames[i % len(frames)], bundle.backbone)
    if warmup:
        stack_forward(features, bundle.stack)

    backbone_time = _time_backbone(bundle, frames, timed, threads, clock, quiet)

    passes = max(1, timed // steps)
    start = clock()
    for _ in range(passes):
        stack_forward(features, bundle.stack)
    stack_per_frame = (clock() - start) / passes / steps

    total = backbone_time + timed * stack_per_frame
    debug_print(
        f"[BENCH] backbone {backbone_time:.4f}s, stack share "
        f"{stack_per_frame:.6f}s/frame over {timed} frames, {threads} thread(s)"
    )
    return BenchReport(
        spf=total / timed,
        fps=timed / total,
        warmup_frames=warmup,
        timed_frames=timed,
        threads=threads,
        input_height=bundle.config.backbone.input_height,
        input_width=bundle.config.backbone.input_width,
    )


def run_benchmarks(
    bundle: ModelBundle,
    warmup: int = 50,
    timed: int = 500,
    threads: int = 1,
    seed: int = 0,
    quiet: bool = True,
) -> List[BenchReport]:
    """Single-threaded report, plus a multi-threaded one when threads > 1"""
    reports = [bench(bundle, warmup, timed, threads=1, seed=seed, quiet=quiet)]
    if threads > 1:
        reports.append(
            bench(bundle, warmup, timed, threads=threads, seed=seed, quiet=quiet)
        )
    return reports
