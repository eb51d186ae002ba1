import numpy as np
import pytest

from affex.backbone import pretrain_backbone
from affex.data import DatasetManifest, FrameRecord, SyntheticConfig, VideoSequence, generate_synthetic
from affex.training import TrainConfig, train

SMALL = dict(
    epochs=3,
    learning_rate=1e-3,
    block_size=4,
    d_f=8,
    lstm_hidden=4,
    head_hidden=(8, 6),
    backbone_hidden=(12,),
    frozen_prefix_depth=1,
    pretrain_epochs=5,
    batch_size=16,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """Train and validation manifests: 6 and 3 videos of 40 frames."""
    root = tmp_path_factory.mktemp("data")
    train_m = generate_synthetic(SyntheticConfig(num_videos=6, frames_per_video=40, seed=1), root / "train")
    val_m = generate_synthetic(SyntheticConfig(num_videos=3, frames_per_video=40, seed=2, video_prefix="w"), root / "val")
    return train_m, val_m


@pytest.fixture(scope="session")
def small_config():
    return TrainConfig(**SMALL)


@pytest.fixture(scope="session")
def small_backbone(small_data, small_config):
    return pretrain_backbone(small_data[0], small_config.backbone_config, small_config.pretrain_config)


@pytest.fixture(scope="session")
def checkpoints(small_data, small_config, small_backbone):
    """One short training run per variant, sharing the backbone."""
    out = {}
    for vid in range(1, 7):
        ckpt, history = train(small_data[0], None, small_config.replace(model_variant=vid), small_backbone)
        out[vid] = (ckpt, history)
    return out


def strip_labels(manifest, expression=False, va=False):
    """Copy of ``manifest`` with the chosen annotation kinds removed."""
    videos = [
        VideoSequence(
            v.video_id,
            tuple(
                FrameRecord(r.video_id, r.frame_index, r.payload_ref, None if expression else r.expression, None if va else r.va)
                for r in v.frames
            ),
        )
        for v in manifest.videos
    ]
    return DatasetManifest(manifest.descriptor_dim, tuple(videos), None, manifest.root, manifest.descriptors)


@pytest.fixture(scope="session")
def relabel():
    return strip_labels


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
