"""Scikit-learn style front end for masked-token training and prediction.

``MaskedTokenPredictor`` wraps the encoder, the masking pipeline, and the
optimizer behind the familiar fit/predict/score surface, so the model can
be configured with ``get_params``/``set_params``, cloned, and dropped into
generic sweep tooling.  ``fit`` consumes chunks (the self-supervised
targets come from masking, not from ``y``); ``predict`` answers masked
inputs; ``score`` grades fill-in questions.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import model as M
from . import scenario as sc
from .experiment import evaluate
from .optim import Adam
from .rng import Rng


class MaskedTokenPredictor(BaseEstimator):
    """Self-supervised masked-token model over caregiver/child chunks.

    Parameters mirror the model and training configuration one-to-one.
    After ``fit``: ``model_`` (the trained network), ``vocab_``,
    ``config_``, ``optimizer_``, and ``loss_curve_`` (mean loss per epoch).
    """

    def __init__(self, d_model=64, n_layers=2, n_heads=4, d_ffn=256,
                 init_std=0.02, activation="gelu", dropout=0.0,
                 mask_pads=False, lr=1e-3, batch_size=64, epochs=1,
                 maskings_per_chunk=sc.MASKINGS_PER_CHUNK, seed=0,
                 scenario_config=None):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_ffn = d_ffn
        self.init_std = init_std
        self.activation = activation
        self.dropout = dropout
        self.mask_pads = mask_pads
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.maskings_per_chunk = maskings_per_chunk
        self.seed = seed
        self.scenario_config = scenario_config

    # -- internals --------------------------------------------------

    def _model_config(self):
        return M.ModelConfig(
            d_model=self.d_model, n_layers=self.n_layers,
            n_heads=self.n_heads, d_ffn=self.d_ffn, init_std=self.init_std,
            activation=self.activation, dropout=self.dropout,
            mask_pads=self.mask_pads, seed=self.seed,
        )

    def _ensure_initialized(self):
        if hasattr(self, "model_"):
            return
        config = self.scenario_config or sc.ScenarioConfig()
        self.config_ = self._model_config()
        self.vocab_ = sc.build_vocabulary(config)
        self.model_ = M.init_model(self.config_, rng=Rng(self.seed).spawn("init"))
        self.optimizer_ = Adam(self.model_.param_list(), lr=self.lr)
        self.loss_curve_ = []
        self._mask_rng = Rng(self.seed).spawn("mask")
        self._shuffle_rng = Rng(self.seed).spawn("shuffle")
        self._dropout_rng = (Rng(self.seed).spawn("dropout")
                             if self.dropout else None)

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this MaskedTokenPredictor is not fitted yet; call fit first"
            )

    def _examples_from_chunks(self, chunks):
        examples = []
        for chunk in chunks:
            ids, slots = sc.encode_chunk(chunk, self.vocab_)
            cand = np.flatnonzero(ids != self.vocab_.pad_id)
            for _ in range(self.maskings_per_chunk):
                examples.append(
                    sc.mask_chunk(ids, slots, self._mask_rng, self.vocab_,
                                  candidates=cand)
                )
        return examples

    def _one_epoch(self, examples):
        order = self._shuffle_rng.permutation(len(examples))
        losses = []
        for lo in range(0, len(order), self.batch_size):
            batch = [examples[i] for i in order[lo:lo + self.batch_size]]
            losses.append(
                M.train_step(self.model_, batch, self.optimizer_,
                             dropout_rng=self._dropout_rng)
            )
        return float(np.mean(losses))

    # -- estimator surface ------------------------------------------

    def fit(self, X, y=None):
        """Train from scratch on chunks ``X`` for ``epochs`` epochs.

        ``y`` is ignored: targets are the original tokens hidden by the
        masking procedure.
        """
        for stale in ("model_", "vocab_", "config_", "optimizer_",
                      "loss_curve_"):
            if hasattr(self, stale):
                delattr(self, stale)
        return self.partial_fit(X)

    def partial_fit(self, X, y=None):
        """Train for ``epochs`` more epochs without reinitializing."""
        chunks = list(X)
        if not chunks:
            raise ValueError("cannot fit on an empty chunk list")
        self._ensure_initialized()
        for _ in range(self.epochs):
            examples = self._examples_from_chunks(chunks)
            self.loss_curve_.append(self._one_epoch(examples))
        return self

    def predict(self, X):
        """Top-1 token id at each masked position of each input.

        ``X`` is a sequence of ``MaskedExample``-like items (``token_ids``,
        ``slot_ids``, ``mask_positions``).  Returns one int64 array per
        input, aligned with its mask positions.
        """
        self._check_fitted()
        out = []
        for item in X:
            rankings = M.predict_masked(self.model_, item)
            out.append(np.array([r[0] for r in rankings], dtype=np.int64))
        return out

    def predict_rankings(self, X):
        """Full descending vocabulary rankings per masked position."""
        self._check_fitted()
        return [M.predict_masked(self.model_, item) for item in X]

    def score(self, X, y=None):
        """Fraction of fill-in questions answered inside their correct set."""
        self._check_fitted()
        questions = list(X)
        if not questions:
            raise ValueError("cannot score an empty question list")
        result = evaluate(self.model_, questions, self.vocab_)
        right = sum(
            result.accuracies[q] * result.counts[q]
            for q in result.counts
            if result.accuracies[q] is not None
        )
        return right / len(questions)
