"""Train the match-mismatch classifier on a small synthetic corpus.

Each example pairs a 5 s EEG window with the speech that produced it and
with speech taken 1 s after the window ends; the model has to tell which is
which. Training uses a few epochs only, enough to see accuracy climb well
above chance. Fine-tuning then adapts the model to each subject.

    python3 demos/match_mismatch.py [n_subjects] [epochs]
"""
import sys

from phonetrack.matchmismatch import (
    ExampleSet,
    SegmentationConfig,
    build_recording_examples,
    evaluate_accuracy,
    finetune,
    train_subject_independent,
)
from phonetrack.nn.model import ModelConfig, init_params
from phonetrack.nn.train import TrainConfig
from phonetrack.synth import SynthConfig, generate_subject


def main(n_subjects: int = 4, epochs: int = 5) -> None:
    seg = SegmentationConfig()
    cfg = SynthConfig(seed=12, duration_s=180, snr_db=0.0, scheme="VC")
    examples = {}
    for i in range(n_subjects):
        sub = generate_subject(cfg, i)
        examples[sub.subject_id] = build_recording_examples(sub.eeg, sub.features, seg,
                                                            recording_id=sub.subject_id)
    mcfg = ModelConfig(eeg_channels=64, feature_dims=3)
    print(f"model: {mcfg.n_frames} frames, {mcfg.n_params} parameters")
    res = train_subject_independent(examples, mcfg, TrainConfig(max_epochs=max(2, epochs),
                                                                 patience=max(1, min(5, epochs - 1)), seed=1), init=init_params(mcfg, 2))
    for row in res.history:
        print(f"epoch {row['epoch']}: train loss {row['train_loss']:.4f}  validation loss {row['val_loss']:.4f}")
    test = ExampleSet.concat([v["test"] for v in examples.values()])
    print(f"subject-independent test accuracy: {evaluate_accuracy(res.params, test):.3f} ({len(test)} examples)")
    for i, (sid, sets) in enumerate(examples.items()):
        ft = finetune(res.params, sets, TrainConfig(max_epochs=3, patience=2, learning_rate=1e-4, seed=10 + i))
        print(f"{sid}: SI {evaluate_accuracy(res.params, sets['test']):.3f} -> "
              f"fine-tuned {evaluate_accuracy(ft.params, sets['test']):.3f}")


if __name__ == "__main__":
    args = [int(a) for a in sys.argv[1:3]]
    main(*args)
