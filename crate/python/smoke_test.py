"""Builds the extension module and exercises it from Python.

Usage: python3 python/smoke_test.py [--no-build]
"""

import importlib
import math
import os
import shutil
import subprocess
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

TARGET = os.path.join(ROOT, "target", "python")


def build_module(dest):
    # Leave interpreter symbols unresolved so the module binds to the running python.
    env = dict(os.environ, PYO3_BUILD_EXTENSION_MODULE="1", CARGO_TARGET_DIR=TARGET)
    if "--no-build" not in sys.argv:
        subprocess.run(
            ["cargo", "build", "--offline", "-p", "neurotok-py"],
            cwd=ROOT,
            env=env,
            check=True,
        )
    lib = os.path.join(TARGET, "debug", "libneurotok_py.so")
    shutil.copy(lib, os.path.join(dest, "neurotok_py.so"))
    sys.path.insert(0, dest)
    return importlib.import_module("neurotok_py")


def expect_value_error(fn, *args):
    try:
        fn(*args)
    except ValueError:
        return
    raise AssertionError(f"{fn.__name__}{args!r} did not raise ValueError")


def main():
    with tempfile.TemporaryDirectory() as tmp:
        nt = build_module(tmp)

        codes = [[1, 2, 3], [4, 5, 8191]]
        text = nt.serialize_neural(codes)
        assert text.startswith("<soeg><nts><EG1>") and text.endswith("<eoeg>"), text
        assert nt.parse_neural(text) == codes
        expect_value_error(nt.parse_neural, "<soeg><nts><EG8192><eoeg>")

        speech = nt.serialize_speech([0, 999])
        assert speech == "<sosp><0><999><eosp>", speech
        assert nt.parse_speech(speech) == [0, 999]

        messages = nt.prompt("eg->text", text, "hello world", 3)
        assert [role for role, _ in messages] == ["system", "user", "assistant"]
        assert messages[2][1] == "hello world"
        expect_value_error(nt.prompt, "eg->eg", "a", "b")

        scores = nt.evaluate(["the cat sat", "a dog"], ["the cat sat", "a dog ran"])
        assert scores["pairs"] == 2 and scores["cer"] > 0.0, scores
        expect_value_error(nt.evaluate, ["a"], [])

        fs = 1000.0
        tone = [[math.sin(2 * math.pi * 200.0 * t / fs) for t in range(4000)]]
        filtered = nt.bandpass(tone, fs)
        power = sum(x * x for x in filtered[0][1000:3000]) / 2000
        assert power < 1e-3, power
        down = nt.resample(tone, fs, 400.0)
        assert len(down[0]) == 1600, len(down[0])

        codec = nt.Codec.untrained(1)
        assert codec.hop == 100 and codec.codebook_size == 8192
        x = [math.sin(t / 7.0) for t in range(450)]
        stages, pad = codec.tokenize(x)
        assert pad == 50 and all(len(row) == 5 for row in stages), (pad, stages)
        y = codec.detokenize(stages, pad)
        assert len(y) == len(x)
        expect_value_error(nt.Codec.load, os.path.join(tmp, "missing.ckpt"))

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
