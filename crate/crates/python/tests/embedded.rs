use std::ffi::CString;

use pyo3::prelude::*;

use probact_py::probact_py;

fn run(code: &str) {
    pyo3::append_to_inittab!(probact_py);
    Python::initialize();
    Python::attach(|py| {
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, None, None) {
            e.print(py);
            panic!("python snippet failed");
        }
    });
}

#[test]
fn module_round_trip() {
    run(r#"
import json, os, tempfile
import probact_py as p

x = p.Tensor([2, 3], [-1.0, 0.5, 2.0, -0.25, 0.0, 3.0])
assert p.relu(x).tolist() == [0.0, 0.5, 2.0, 0.0, 0.0, 3.0]

act = p.ProbAct("fixed", sigma=0.0)
y, eps = act.forward(x)
assert y.tolist() == p.relu(x).tolist()
assert not act.trainable and p.ProbAct("bounded").trainable

k = p.Tensor([3], [-1000.0, 0.0, 1000.0])
s = p.bounded_sigma(k, 2.0, 5.0).tolist()
assert 0.0 < s[0] < s[1] < s[2] < 2.0 and abs(s[1] - 1.0) < 1e-12

assert [p.step_decay(e) for e in (0, 100, 399)] == [0.01, 0.001, 1e-5]
assert p.is_trainable_mode("single") and not p.is_trainable_mode("fixed")

try:
    p.ProbAct("nonsense")
    raise AssertionError("expected ValueError")
except ValueError:
    pass

cfg = json.loads(p.default_config())
cfg["model"] = "mlp"
cfg["epochs"] = 1
cfg["batch_size"] = 32
cfg["activation"]["name"] = "probact:single"
cfg["dataset"] = {"kind": "synthetic", "shape": "blobs", "train": 64, "test": 32, "classes": 2, "noise": 0.3, "lift": 1}
out = tempfile.mkdtemp()
cfg["out_dir"] = out
metrics = json.loads(p.train(json.dumps(cfg)))
assert len(metrics["epochs"]) == 1
ckpt = os.path.join(out, "checkpoint.bin")
info = json.loads(p.checkpoint_info(ckpt))
assert info["noise_seed"] == cfg["seeds"]["noise"]
relu_ckpt = os.path.join(out, "relu.bin")
p.swap_to_relu(ckpt, relu_ckpt)
assert p.evaluate(relu_ckpt) == p.evaluate(ckpt, eval_mode="mean")
"#);
}
