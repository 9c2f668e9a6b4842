import numpy as np
import pytest

from lorapro.config import RunConfig, parse_config_text
from lorapro.errors import ConfigError
from lorapro.tasks import build_task

GOOD_CONFIG = """
# demo run
[run]
task = teacher_student_regression
method = lora_pro_adamw
steps = 50
batch_size = 16
seed = 3
out_dir = runs/demo

[task]
d_in = 8
d_hidden = 16
d_out = 4
n_samples = 128
noise_sd = 0.01
perturb_rank = 4
perturb_scale = 0.5

[adapter]
rank = 2
alpha = 16
scaling = rslora
init = standard

[optimizer]
lr = 1e-3
weight_decay = 0.0
schedule = cosine_with_warmup
warmup_ratio = 0.03

[lorapro]
x_strategy = sylvester
damping = 1e-8
fallback = damp
"""


def test_parse_full_config():
    cfg = parse_config_text(GOOD_CONFIG)
    assert cfg.task == "teacher_student_regression"
    assert cfg.method == "lora_pro_adamw"
    assert cfg.steps == 50 and cfg.batch_size == 16 and cfg.seed == 3
    assert cfg.rank == 2 and cfg.alpha == 16.0
    assert cfg.lr == pytest.approx(1e-3)
    assert cfg.task_params["d_hidden"] == 16
    assert cfg.x_strategy == "sylvester"


def test_defaults_follow_conventions():
    cfg = RunConfig(task="teacher_student_regression",
                    task_params={"d_in": 4, "d_hidden": 4, "d_out": 4})
    assert cfg.rank == 8 and cfg.alpha == 16.0 and cfg.scaling == "rslora"
    assert cfg.beta1 == 0.9 and cfg.beta2 == 0.999
    assert cfg.schedule == "cosine_with_warmup" and cfg.warmup_ratio == 0.03
    assert cfg.weight_decay == 0.0


def test_unknown_key_named_in_error():
    bad = GOOD_CONFIG.replace("batch_size = 16", "batchsize = 16")
    with pytest.raises(ConfigError, match="batchsize"):
        parse_config_text(bad)


def test_unknown_section_rejected():
    with pytest.raises(ConfigError, match="extras"):
        parse_config_text(GOOD_CONFIG + "\n[extras]\nfoo = 1\n")


def test_unknown_task_key_rejected():
    bad = GOOD_CONFIG.replace("noise_sd = 0.01", "noise = 0.01")
    with pytest.raises(ConfigError, match="noise"):
        parse_config_text(bad)


def test_zero_steps_rejected():
    with pytest.raises(ConfigError, match="steps"):
        parse_config_text(GOOD_CONFIG.replace("steps = 50", "steps = 0"))


def test_bad_method_rejected():
    with pytest.raises(ConfigError, match="method"):
        parse_config_text(GOOD_CONFIG.replace("lora_pro_adamw", "sgd_with_momentum"))


def test_bad_type_rejected():
    with pytest.raises(ConfigError, match="steps"):
        parse_config_text(GOOD_CONFIG.replace("steps = 50", "steps = many"))


def test_config_round_trip_dict():
    cfg = parse_config_text(GOOD_CONFIG)
    echo = cfg.to_dict()
    assert echo["run"]["seed"] == 3
    assert echo["adapter"]["rank"] == 2
    assert echo["task"]["perturb_rank"] == 4


def test_teacher_student_task_shapes_and_determinism():
    params = {"d_in": 6, "d_hidden": 10, "d_out": 3, "n_samples": 40,
              "noise_sd": 0.0, "perturb_rank": 2, "perturb_scale": 0.5}
    t1 = build_task("teacher_student_regression", params, np.random.default_rng(5))
    t2 = build_task("teacher_student_regression", params, np.random.default_rng(5))
    assert t1.inputs.shape == (40, 6)
    assert t1.targets.shape == (40, 3)
    assert [w.shape for w in t1.base_weights] == [(6, 10), (10, 3)]
    assert t1.activations == ["tanh", "identity"] and t1.loss_kind == "mse"
    assert np.array_equal(t1.inputs, t2.inputs)
    assert np.array_equal(t1.base_weights[0], t2.base_weights[0])


def test_teacher_student_perturbation_is_low_rank():
    params = {"d_in": 8, "d_hidden": 8, "d_out": 8, "n_samples": 10,
              "noise_sd": 0.0, "perturb_rank": 2, "perturb_scale": 0.5}
    rng = np.random.default_rng(6)
    task = build_task("teacher_student_regression", params, rng)
    # regenerate the teacher with the same stream to recover the perturbation
    ref = build_task("teacher_student_regression",
                     dict(params, perturb_scale=0.0), np.random.default_rng(6))
    for base, teacher in zip(task.base_weights, ref.base_weights):
        delta = base - teacher
        sv = np.linalg.svd(delta, compute_uv=False)
        assert int(np.sum(sv > 1e-9 * sv[0])) == 2


def test_two_cluster_task():
    task = build_task("two_cluster_classification",
                      {"d": 5, "k": 3, "n_samples": 30}, np.random.default_rng(7))
    assert task.inputs.shape == (30, 5)
    assert task.targets.dtype == np.int64
    assert task.loss_kind == "softmax_cross_entropy"
    assert task.base_weights[0].shape == (5, 3)
    assert set(np.unique(task.targets)) <= {0, 1, 2}


def test_csv_task(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("x1,x2,y\n1.0,2.0,3.0\n4.0,5.0,9.0\n0.5,0.5,1.0\n")
    task = build_task("csv_dataset", {"path": str(path), "target_column": "y"},
                      np.random.default_rng(8))
    assert task.inputs.shape == (3, 2)
    assert task.targets.shape == (3, 1)
    assert task.loss_kind == "mse"
    with pytest.raises(ConfigError, match="target_column"):
        build_task("csv_dataset", {"path": str(path), "target_column": "label"},
                   np.random.default_rng(8))


def test_csv_task_classification(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("x1,x2,y\n1.0,2.0,0\n4.0,5.0,1\n0.5,0.5,1\n")
    task = build_task(
        "csv_dataset",
        {"path": str(path), "target_column": "y", "loss": "softmax_cross_entropy"},
        np.random.default_rng(9),
    )
    assert task.loss_kind == "softmax_cross_entropy"
    assert task.base_weights[0].shape == (2, 2)
    assert np.array_equal(task.targets, np.array([0, 1, 1]))
