# src/flowtsvad/parallel_process.py
import concurrent.futures
import threading
from typing import Callable, List, Sequence

from tqdm import tqdm

from src.flowtsvad.errors import DataError


def _fold_info(info_list: list, postfix: dict, global_stats: dict):
    """
    Fold one item's info records into the progress-bar postfix:
      status -> latest text, metric -> running correct/total, error -> latest message
    """
    for info in info_list:
        if info["type"] == "status":
            postfix[info.get("name", "status")] = info.get("description", "")

        elif info["type"] == "metric":
            key = info.get("name", "default")
            stats = global_stats.setdefault(key, {"correct": 0, "total": 0})
            stats["correct"] += info.get("correct", 0)
            stats["total"] += info.get("total", 0)
            acc = stats["correct"] / stats["total"] if stats["total"] else 0
            postfix[f"{key}_acc"] = round(acc, 3)

        elif info["type"] == "error":
            postfix["error"] = info.get("msg")


def process_items_parallel(
    items: Sequence,
    process_one: Callable,
    workers: int = 4,
    desc: str = "Processing",
    retries: int = 1,
    strict: bool = True,
    **kwargs,
) -> List:
    """
    Run process_one(item=..., **kwargs) -> (result, info_list) over items.

    Results come back in item order regardless of scheduling, so any randomness
    inside process_one must be derived from the item itself. An item whose last
    attempt reports an error is retried up to `retries` attempts in total; with
    `strict`, the first failed item raises DataError once all items finished.
    """
    if retries < 1:
        raise ValueError(f"retries must be >= 1, got {retries}")

    def _run_one(item):
        result, info_list = None, [{"type": "error", "msg": f"item:{item} not executed"}]
        for _ in range(retries):
            try:
                result, info_list = process_one(item=item, **kwargs)
            except Exception as e:
                result, info_list = None, [{"type": "error", "msg": f"item:{item} {e}", "exception": e}]
                continue
            if not any(info.get("type") == "error" for info in info_list):
                break
        return result, info_list

    results = [None] * len(items)
    failures = []
    postfix = {}
    global_stats = {}

    # tqdm must be locked in threaded code
    pbar_lock = threading.Lock()
    pbar = tqdm(total=len(items), desc=desc, dynamic_ncols=True)

    def _collect(pos, result, info_list):
        results[pos] = result
        errors = [i for i in info_list if i.get("type") == "error"]
        if errors:
            failures.append((pos, errors[0]))
        _fold_info(info_list, postfix, global_stats)
        with pbar_lock:
            pbar.set_postfix(postfix)
            pbar.update(1)

    if workers <= 1:
        for pos, item in enumerate(items):
            _collect(pos, *_run_one(item))
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            futures = {executor.submit(_run_one, item): pos for pos, item in enumerate(items)}
            for future in concurrent.futures.as_completed(futures):
                _collect(futures[future], *future.result())
    pbar.close()

    if strict and failures:
        pos, error = sorted(failures, key=lambda f: f[0])[0]
        raise DataError(f"{len(failures)} item(s) failed; first: {error.get('msg')}") from error.get(
            "exception"
        )
    return results
