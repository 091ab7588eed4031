"""Smoke test for the vchatter Python extension.

Builds the extension with cargo when it is not importable, then exercises
scoring, statistics, the plan-card grammar and one scripted simulation.

    python3 python/smoke_test.py
"""
import pathlib
import shutil
import subprocess
import sys
import tempfile

HERE = pathlib.Path(__file__).resolve().parent
ROOT = HERE.parent


def build_extension():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "vchatter-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    release = ROOT / "target" / "release"
    lib = next(p for ext in ("so", "dylib") for p in release.glob(f"libvchatter.{ext}"))
    shutil.copy(lib, HERE / "vchatter.so")


def load():
    sys.path.insert(0, str(HERE))
    try:
        import vchatter
    except ImportError:
        build_extension()
        import vchatter
    return vchatter


def main():
    vc = load()
    hui = (ROOT / "crates" / "core" / "tests" / "fixtures" / "hui_card.txt").read_text()

    assert vc.score({"instrument": "sas_a", "items": [3] * 18})["total"] == 54
    assert vc.score({"instrument": "lsas", "items": [{"fear": 2, "avoidance": 2}] * 24})["total"] == 96
    assert [vc.level_for_day(d) for d in range(1, vc.DAYS + 1)] == ["Low", "Low", "Medium", "Medium", "High", "High"]
    assert vc.agent_h_count("High") == 2

    w = vc.wilcoxon([4, 5, 6, 6, 6, 6, 6, 6, 6, 6], [4, 3, 5, 4, 5, 5, 4, 5, 4, 5])
    assert abs(w["z"] + 2.7386) < 1e-3, w

    card = vc.parse_plan_card(hui, "Medium")
    assert card["roles"][0]["name"] == "Hui"
    assert vc.parse_plan_card(vc.render_plan_card(card), "Medium") == card

    with tempfile.TemporaryDirectory() as tmp:
        report = vc.run_simulation(str(pathlib.Path(tmp) / "run"))
        assert report["ok"], report["first_violation"]
        data = pathlib.Path(tmp) / "cohort"
        assert len(vc.seed_cohort(str(data), 3, 42)) == 3
        table = vc.outcome_report(str(data))
        assert table.startswith("Measure") and "N = 3" in table

    print("smoke test passed")


if __name__ == "__main__":
    main()
