"""The two-tower model: named parameters plus the per-view forward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .crossvil import init_cross_params, pool_interests, project_common
from .embedding import embed_view, init_embedding_params, item_representations
from .intravid import IntraVidOutput, init_intravid_params, intravid_forward
from .rng import Rng
from .tensorcore import Tensor


@dataclass
class TowerOutput:
    view: str
    intravid: IntraVidOutput
    items: Tensor  # (num_items + 1, D) item representations of this view

    @property
    def interests(self) -> Tensor:
        return self.intravid.interests


class BivRecModel:
    def __init__(self, config: RunConfig, num_items: int, feature_dim: int, rng: Rng | None = None,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        self.num_items = num_items
        self.feature_dim = feature_dim
        self.params: dict[str, Tensor] = params if params is not None else {}
        if params is None:
            rng = rng or Rng(config.seed)
            self.params.update(self.init_params(config, num_items, feature_dim, rng))

    @property
    def views(self) -> tuple[str, ...]:
        return self.config.views

    @staticmethod
    def init_params(cfg: RunConfig, num_items: int, feature_dim: int, rng: Rng,
                    views: tuple[str, ...] | None = None, cross: bool | None = None) -> dict[str, Tensor]:
        views = cfg.views if views is None else views
        params: dict[str, Tensor] = {}
        init_rng = rng.child("init")
        for view in views:
            vr = init_rng.child(view)
            params.update(init_embedding_params(view, cfg.max_len, cfg.scales, cfg.dim, vr.child("embed"),
                                                num_items=num_items, feature_dim=feature_dim))
            params.update(init_intravid_params(view, cfg.dim, cfg.gauss_layers, cfg.k_list, cfg.max_len,
                                               vr.child("intravid"), cfg.use_ffn))
        if cross if cross is not None else len(cfg.views) == 2:
            params.update(init_cross_params(cfg.dim, cfg.d_common, cfg.k_list[-1], cfg.beta_init,
                                            init_rng.child("cross")))
        return params

    def view_params(self, view: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(view + ".")}

    def tower(self, view: str, prefix: np.ndarray, mask: np.ndarray, features: np.ndarray | None,
              rng: Rng | None) -> TowerOutput:
        """One tower's forward pass; ``rng=None`` runs deterministically (no Gumbel noise)."""
        if view not in self.views:
            raise ValueError(f"the {view!r} tower is not part of a {self.config.view_mode} model")
        if view == "mm" and features is None:
            raise ValueError("the multimodal tower needs a feature table")
        cfg = self.config
        emb = embed_view(view, prefix, mask, self.params, cfg.scales, features)
        out = intravid_forward(emb, self.params, view, cfg, rng)
        return TowerOutput(view, out, item_representations(view, self.params, features))

    def common(self, view: str, interests: Tensor) -> Tensor:
        h = pool_interests(interests, self.params[f"cross.pool.{view}"])
        return project_common(h, self.params, view, self.config.normalize_common)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())
