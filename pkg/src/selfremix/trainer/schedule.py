from __future__ import annotations


class WarmupDecaySchedule:
    """Linear warmup from 0 to ``peak`` over ``warmup_steps`` mini-batch steps,
    then a multiplicative ``factor`` every ``every`` epochs completed after warmup.
    """

    def __init__(self, peak: float, warmup_steps: int, factor: float = 1.0, every: int = 1):
        if every < 1:
            raise ValueError("decay interval must be at least one epoch")
        self.peak = peak
        self.warmup_steps = warmup_steps
        self.factor = factor
        self.every = every
        self.post_warmup_epochs = 0

    def lr(self, step: int) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.peak * step / self.warmup_steps
        return self.peak * self.factor ** (self.post_warmup_epochs // self.every)

    def epoch_end(self, step: int):
        if step >= self.warmup_steps:
            self.post_warmup_epochs += 1

    def state_dict(self) -> dict:
        return {"post_warmup_epochs": self.post_warmup_epochs}

    def load_state_dict(self, state: dict):
        self.post_warmup_epochs = int(state["post_warmup_epochs"])
