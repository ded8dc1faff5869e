import os
from multiprocessing import Pool
from typing import Dict, List, Optional, Sequence

from tqdm import tqdm

from fcs_mpc.simulation import run
from fcs_mpc.utils.scenario import ScenarioConfig, apply_overrides, write_logs
from fcs_mpc.utils.utils import printer, value_label


SWEEP_PARAMS = ("delta", "e", "alpha", "beta", "gamma", "y0")


def update_scenario(scenario: ScenarioConfig, config: dict) -> ScenarioConfig:
    return apply_overrides(scenario, **config)


def sweep_run(config: Dict[str, float], scenario: ScenarioConfig,
              out_dir: str) -> str:
    scenario = update_scenario(scenario, config)
    logs = run(scenario, verbose=False)
    write_logs(logs, out_dir, scenario=scenario)
    return out_dir


def sweep(scenario: ScenarioConfig, param: str, values: Sequence[float],
          out_root: str, workers: Optional[int] = None,
          verbose: bool = False) -> List[str]:
    """Run one scenario per value of a parameter, each written to
    `<out_root>/<param>_<value>/`.

    Args:
        scenario (ScenarioConfig): Base scenario
        param (str): One of SWEEP_PARAMS
        values (list): Values to run
        out_root (str): Parent output directory
        workers (int): Process count, None uses all cores
        verbose (bool): Print progress

    Returns:
        out_dirs (list): Output directory per value, in input order
    """
    if param not in SWEEP_PARAMS:
        raise ValueError(f"Cannot sweep '{param}', choose from {SWEEP_PARAMS}")
    jobs = [({param: v}, scenario, os.path.join(out_root, f"{param}_{value_label(v)}"))
            for v in values]
    printer(f"Sweeping {param} over {len(jobs)} values", verbose)

    if workers == 1 or len(jobs) <= 1:
        return [sweep_run(*job) for job in tqdm(jobs, disable=not verbose)]
    with Pool(processes=workers) as pool:
        out_dirs = pool.starmap(sweep_run, jobs)
    for config, _, out_dir in jobs:
        printer(f"{config} -> {out_dir}", verbose)
    return out_dirs
