"""Scratch: validate final config across seeds (not part of the package)."""
import time
import numpy as np
from wmhseg.phantom import PhantomConfig, generate_dataset
from wmhseg.pipeline import wm_training_cases, wmh_training_cases, segment_white_matter, PipelineConfig
from wmhseg.architectures import build_trimmed_unet, build_resunet
from wmhseg.training import TrainConfig, LossConfig, train
from wmhseg.metrics import dice

for data_seed, train_seed, batch in [(42,1,4),(7,2,4),(123,3,4),(42,1,8),(7,2,8)]:
    t0 = time.time()
    cases = generate_dataset(PhantomConfig(), 10, seed=data_seed)
    cfg = TrainConfig(epochs=200, seed=train_seed, batch_size=batch, max_iterations=480)
    wm_net, wm_hist = train(build_trimmed_unet(base_width=4, depth=3),
                            wm_training_cases(cases), cfg, LossConfig())
    wm_masks = [segment_white_matter(c.t1, wm_net, PipelineConfig()) for c in cases]
    refined = [dice(m, c.wm_truth) for m, c in zip(wm_masks, cases)]
    net, hist = train(build_resunet(base_width=4, depth=4),
                      wmh_training_cases(cases, wm_masks), cfg, LossConfig())
    d = hist.val_dice
    per_epoch = hist.iterations / len(d)
    cross = next((int((i+1)*per_epoch) for i, v in enumerate(d) if v >= 0.85), None)
    print(f"ds{data_seed}/ts{train_seed}/b{batch}: WM={wm_hist.val_dice[-1]:.3f} "
          f"refined_min={min(refined):.3f} WMH final={d[-1]:.3f} best={max(d):.3f} "
          f"cross@{cross} ({time.time()-t0:.0f}s)", flush=True)
