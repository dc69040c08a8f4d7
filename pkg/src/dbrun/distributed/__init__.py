"""Synchronous data-parallel training over pluggable transports."""

from .bench import bench_allreduce, parse_size, parse_sizes, write_csv
from .communicator import (
    DEFAULT_TIMEOUT,
    CollectiveMismatchError,
    Communicator,
    CommunicatorError,
    CommunicatorTimeout,
    RankCollisionError,
    ShapeMismatchError,
    SingleCommunicator,
    ring_chunks,
)
from .data_parallel import (
    MultiNodeOptimizer,
    StructuralDivergenceError,
    broadcast_params,
    create_communicator,
    create_multi_node_optimizer,
    scatter_dataset,
    shard_sizes,
)
from .inprocess import InProcessCommunicator, new_group_name, run_inprocess
from .tcp import TCPCommunicator, free_endpoints, launch_tcp

multi_node_optimizer = create_multi_node_optimizer

__all__ = [
    "DEFAULT_TIMEOUT",
    "CollectiveMismatchError",
    "Communicator",
    "CommunicatorError",
    "CommunicatorTimeout",
    "InProcessCommunicator",
    "MultiNodeOptimizer",
    "RankCollisionError",
    "ShapeMismatchError",
    "SingleCommunicator",
    "StructuralDivergenceError",
    "TCPCommunicator",
    "bench_allreduce",
    "broadcast_params",
    "create_communicator",
    "create_multi_node_optimizer",
    "free_endpoints",
    "launch_tcp",
    "multi_node_optimizer",
    "new_group_name",
    "parse_size",
    "parse_sizes",
    "ring_chunks",
    "run_inprocess",
    "scatter_dataset",
    "shard_sizes",
    "write_csv",
]
