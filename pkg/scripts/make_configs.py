"""Regenerate configs/desk.toml and configs/full.toml from the built-in profiles."""
from pathlib import Path

from motiondiff.config import desk_profile, full_profile, save_config

ROOT = Path(__file__).resolve().parents[1] / "configs"

if __name__ == "__main__":
    ROOT.mkdir(exist_ok=True)
    # data dirs are resolved relative to the config file
    save_config(ROOT / "desk.toml", desk_profile("../data/train"))
    save_config(ROOT / "full.toml", full_profile("../data/train"))
    print(f"wrote {ROOT / 'desk.toml'} and {ROOT / 'full.toml'}")
