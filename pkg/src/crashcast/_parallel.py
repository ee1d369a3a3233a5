"""Order-preserving map over an optional process pool."""
from concurrent.futures import ProcessPoolExecutor


def parallel_map(fn, jobs, workers=1):
    jobs = list(jobs)
    if workers is None or workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
