from typing import TYPE_CHECKING, List, Protocol, Tuple

from numpy.typing import ArrayLike

from .dq_algebra import FloatArray, UnitDualQuaternion
from .models import RunManifest

if TYPE_CHECKING:
    from .experiment_harness import EpisodeLog
    from .gp_learning import GPDataset


class Kernel(Protocol):
    """Interface for covariance functions over quaternion-valued inputs.

    Implementations act on row-stacked arrays of flat inputs, four numbers
    per unit quaternion and eight per unit dual quaternion, and must be
    invariant under the sign of each rotational part.
    """

    def distance_sq(self, A: FloatArray, B: FloatArray) -> FloatArray:
        """Squared input-space distance between every pair of rows.

        Args:
            A: Array of shape ``(n, d)``.
            B: Array of shape ``(m, d)``.

        Returns:
            Array of shape ``(n, m)``.
        """
        ...

    def __call__(self, A: FloatArray, B: FloatArray) -> FloatArray:
        """Cross-covariance matrix ``k(A_i, B_j)``.

        Args:
            A: Array of shape ``(n, d)``.
            B: Array of shape ``(m, d)``.

        Returns:
            Array of shape ``(n, m)``.
        """
        ...

    def diag(self, A: FloatArray) -> FloatArray:
        """Prior variances ``k(A_i, A_i)``, shape ``(n,)``."""
        ...


class GainScheduleFn(Protocol):
    """Maps a scheduling variable to the controller gain matrices.

    The returned matrices must stay symmetric positive definite with minimum
    eigenvalues no smaller than the ``alpha`` bounds of the schedule they are
    attached to; the gain schedule checks this on every evaluation.
    """

    def __call__(self, rho: FloatArray) -> Tuple[ArrayLike, ArrayLike]:
        """Evaluates the schedule.

        Args:
            rho: Scheduling variable chosen by the caller.

        Returns:
            ``(K_omega, K_v)``, two 3x3 matrices.
        """
        ...


class DisturbanceSource(Protocol):
    """A state-dependent disturbance acting on the commanded twist."""

    def at(self, Q_true: UnitDualQuaternion) -> Tuple[FloatArray, FloatArray]:
        """Disturbance at a pose.

        Args:
            Q_true: True pose of the vehicle.

        Returns:
            ``(rho_omega, rho_v)``: the body angular-velocity disturbance
            (rad/s) and the inertial linear-velocity disturbance (m/s).
        """
        ...


class EpisodeStore(Protocol):
    """Interface for persisting runs: episode logs, manifests and GP datasets.

    A store is rooted at one run directory. All operations are asynchronous
    and must leave no partially written file behind on failure.
    """

    async def save_episode(self, log: "EpisodeLog") -> List[str]:
        """Writes the per-tick and per-update logs of one episode.

        Args:
            log: The episode to save; its seed identifies it in the store.

        Returns:
            Paths of the written files, relative to the run directory.
        """
        ...

    async def load_episode(self, seed: int) -> "EpisodeLog":
        """Reads back one episode.

        Args:
            seed: Seed of the episode.

        Returns:
            The episode log, numerically identical to the one saved.

        Raises:
            FileNotFoundError: If the run holds no episode for this seed.
            SchemaMismatchError: If the files were written with another schema.
        """
        ...

    async def list_episodes(self) -> List[int]:
        """Returns the seeds of all stored episodes in ascending order."""
        ...

    async def save_manifest(self, manifest: RunManifest) -> str:
        """Writes the run manifest and returns its path."""
        ...

    async def load_manifest(self) -> RunManifest:
        """Reads the run manifest.

        Raises:
            FileNotFoundError: If the run directory has no manifest.
            SchemaMismatchError: If the manifest was written with another schema.
        """
        ...

    async def save_dataset(self, name: str, data: "GPDataset") -> str:
        """Stores a GP dataset snapshot under ``name`` and returns its path."""
        ...

    async def load_dataset(self, name: str) -> "GPDataset":
        """Loads a GP dataset snapshot.

        Raises:
            FileNotFoundError: If no snapshot with this name exists.
        """
        ...
