"""Protocol parameter bundle and the survivor-quorum selection policy."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .field import DEFAULT_MODULUS, is_probable_prime


@dataclass(frozen=True)
class ProtocolConfig:
    """Parameters shared by every protocol in one simulated round.

    ``recovery_quorum`` is the number of recovery messages the server
    waits for; ``privacy_threshold`` the number of colluding users the
    masking must resist; ``dropout_tolerance`` the number of users allowed
    to drop.  Feasibility requires
    ``num_users - dropout_tolerance >= recovery_quorum > privacy_threshold``,
    which also forces ``privacy_threshold + dropout_tolerance < num_users``.
    """

    num_users: int
    privacy_threshold: int
    dropout_tolerance: int
    recovery_quorum: int
    model_len: int
    modulus: int = DEFAULT_MODULUS
    weights: tuple | None = None

    def __post_init__(self):
        n, t = self.num_users, self.privacy_threshold
        d_tol, u = self.dropout_tolerance, self.recovery_quorum
        if n < 1:
            raise ConfigError("num_users", f"need at least one user, got {n}")
        if t < 0:
            raise ConfigError("privacy_threshold", f"must be >= 0, got {t}")
        if d_tol < 0:
            raise ConfigError("dropout_tolerance", f"must be >= 0, got {d_tol}")
        if u <= t:
            raise ConfigError(
                "recovery_quorum", f"need quorum > privacy threshold, {u} <= {t}"
            )
        if u > n - d_tol:
            raise ConfigError(
                "recovery_quorum",
                f"quorum {u} unreachable with {d_tol} dropouts among {n} users",
            )
        if self.model_len < 1:
            raise ConfigError("model_len", f"must be >= 1, got {self.model_len}")
        if self.modulus < 2 or not is_probable_prime(self.modulus):
            raise ConfigError("modulus", f"{self.modulus} is not prime")
        if self.weights is not None and len(self.weights) != n:
            raise ConfigError(
                "weights", f"got {len(self.weights)} weights for {n} users"
            )

    @property
    def data_dim(self) -> int:
        return self.recovery_quorum - self.privacy_threshold

    def weight_of(self, user_id: int) -> int:
        if self.weights is None:
            return 1
        return int(self.weights[user_id - 1])


def choose_recovery_quorum(num_users: int, dropout_rate: float) -> int:
    """Quorum policy: 0.7N for dropout rates up to 0.3, N/2 + 1 beyond.

    The lower quorum widens each decoded segment batch and shrinks
    recovery traffic; past 30% expected dropouts the safer N/2 + 1 keeps
    the quorum reachable.
    """
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigError("dropout_rate", f"need 0 <= p < 1, got {dropout_rate}")
    if dropout_rate <= 0.3:
        return max(1, int(0.7 * num_users))
    return num_users // 2 + 1
