"""
ロールアウトサービスモジュール - 質問ごとに K 本の候補を非同期でサンプリングする
"""

import asyncio
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from gc2po_lab.models.episode import SegmentedTrajectory, parse_episodes
from gc2po_lab.models.policy import PolicyParams, Trajectory, sample_trajectory
from gc2po_lab.models.task import ArithmeticTask, verify
from gc2po_lab.utils.config import HyperParams

logger = logging.getLogger(__name__)


@dataclass
class GroupRollout:
    """1 つの質問に対する K 本の候補"""

    task: ArithmeticTask
    trajectories: list[Trajectory]
    segmented: list[SegmentedTrajectory]

    @property
    def r_outs(self) -> list[int]:
        return [t.r_out for t in self.trajectories]


def rollout_one(
    params: PolicyParams, task: ArithmeticTask, hyper: HyperParams, sample_seed: int, operator_seed: int
) -> tuple[Trajectory, SegmentedTrajectory]:
    """1 本サンプリングして分割・検証まで済ませる"""
    trajectory = sample_trajectory(
        params, task.question, temperature=hyper.temperature, max_len=hyper.max_len, seed=sample_seed
    )
    seg = parse_episodes(trajectory.tokens)
    trajectory.answer = seg.answer
    trajectory.r_out = verify(trajectory, task)
    trajectory.extras["operator_seed"] = operator_seed
    return trajectory, seg


class RolloutCollector:
    """θ_old を固定したまま、質問ごとの候補グループを並行に集める"""

    def __init__(self, params: PolicyParams, hyper: HyperParams, max_workers: int = 4) -> None:
        """
        Args:
            params: ロールアウトに使う方策 (θ_old)
            hyper: K, 温度, max_len などの設定
            max_workers: 同時に走らせるサンプリングの数
        """
        self.params = params
        self.hyper = hyper
        self.max_workers = max_workers

    async def collect(self, tasks: Sequence[ArithmeticTask], seed: np.random.SeedSequence) -> list[GroupRollout]:
        """各質問について K 本ずつサンプリングする (結果の順序は tasks の順)"""
        semaphore = asyncio.Semaphore(self.max_workers)
        children = seed.spawn(len(tasks))
        coroutines = [self._collect_group(task, child, semaphore) for task, child in zip(tasks, children)]
        groups: list[GroupRollout] = await asyncio.gather(*coroutines)
        logger.debug("%d 問 × %d 本のロールアウトを収集しました", len(groups), self.hyper.group_size)
        return groups

    async def _collect_group(
        self, task: ArithmeticTask, seed: np.random.SeedSequence, semaphore: asyncio.Semaphore
    ) -> GroupRollout:
        state = seed.generate_state(2 * self.hyper.group_size, dtype=np.uint32)
        trajectories: list[Trajectory] = []
        segmented: list[SegmentedTrajectory] = []
        for k in range(self.hyper.group_size):
            async with semaphore:
                trajectory, seg = await asyncio.to_thread(
                    rollout_one, self.params, task, self.hyper, int(state[2 * k]), int(state[2 * k + 1])
                )
            trajectories.append(trajectory)
            segmented.append(seg)
        return GroupRollout(task=task, trajectories=trajectories, segmented=segmented)
