"""The full model bundle: topic parameters, language model and encoder."""
from __future__ import annotations

from dataclasses import dataclass

from .config import TrainConfig
from .corpus import Vocab
from .inference import Encoder, EncoderConfig
from .langmodel import LanguageModel, LmConfig
from .rgbn import TopicModelParams


@dataclass
class RGBNRNN:
    vocab: Vocab
    config: TrainConfig
    topic: TopicModelParams
    lm: LanguageModel
    encoder: Encoder

    @classmethod
    def init(cls, vocab: Vocab, config: TrainConfig, rng) -> "RGBNRNN":
        topic = TopicModelParams.init_random(vocab.Vc, config.topics, rng, config.tau0,
                                             config.eta0, config.eta_pi, config.recurrent)
        lm = LanguageModel.init(LmConfig(vocab.V, config.embed_dim, list(config.lm_hidden),
                                         list(config.topics), config.dropout, config.flipped), rng)
        enc = Encoder.init(EncoderConfig(vocab.Vc, list(config.topics), config.recurrent,
                                         config.log1p_input, config.k_min), rng)
        return cls(vocab, config, topic, lm, enc)

    @property
    def test_context(self) -> str:
        """Preceding sentences for the recurrent model, leave-one-out otherwise."""
        return "preceding" if self.topic.recurrent else "leave-one-out"

    def neural_params(self) -> dict:
        out = {f"lm.{k}": v for k, v in self.lm.params.items()}
        out.update({f"enc.{k}": v for k, v in self.encoder.params.items()})
        return out
