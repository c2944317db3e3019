"""
csrecon 토이 실행 스크립트
학습 + 평가를 한 번에 실행
"""
import os
import subprocess
import sys
from pathlib import Path


def run(step: str, *args: str) -> None:
    cmd = [sys.executable, "-m", "csrecon", *args]
    print(f"▶ {step}: {' '.join(cmd[1:])}")
    code = subprocess.call(cmd)
    if code != 0:
        print(f"❌ {step} 실패 (exit {code})")
        sys.exit(code)
    print(f"✅ {step} 완료")
    print()


def main():
    # 현재 디렉토리를 스크립트 위치로 설정
    script_dir = Path(__file__).parent.absolute()
    os.chdir(script_dir)

    print("=" * 60)
    print("🔬 csrecon 토이 실행")
    print("=" * 60)
    print()

    config = Path(sys.argv[1]) if len(sys.argv) > 1 else script_dir / "configs" / "toy.cfg"
    if not config.exists():
        print(f"❌ 오류: {config} 파일을 찾을 수 없습니다.")
        sys.exit(1)
    if not (script_dir / "csrecon").exists():
        print("❌ 오류: csrecon 폴더를 찾을 수 없습니다.")
        sys.exit(1)

    # 필요한 패키지 확인
    try:
        import numpy  # noqa: F401
        import pydantic  # noqa: F401
        import scipy  # noqa: F401
    except ImportError as e:
        print(f"❌ 필요한 패키지가 설치되지 않았습니다: {e}")
        print()
        print("다음 명령어로 설치하세요:")
        print("  pip install -r requirements.txt")
        sys.exit(1)

    print("✅ 필요한 패키지 확인 완료")
    print()

    from csrecon.config import load_config
    from csrecon.datasets import synthetic_textures
    from csrecon.engine import Rng
    from csrecon.netpbm import write_image

    cfg = load_config(config)
    out = Path(cfg.out_dir)
    images = out / "test_images"
    # 학습 풀과 겹치지 않는 평가용 텍스처
    for i, img in enumerate(synthetic_textures(4, 128, cfg.image_channels, Rng(cfg.seed).derive("test-images"))):
        write_image(images / f"texture_{i}.{'pgm' if cfg.image_channels == 1 else 'ppm'}", img)

    run("학습", "train", "--config", str(config))
    run("평가", "eval", "--dir", str(images), "--ckpt", str(out / "model.rcsc"), "--baseline",
        "--csv", str(out / "eval.csv"), "--save-dir", str(out / "reconstructions"))

    print("=" * 60)
    print(f"📁 결과 폴더: {out}")
    print("   train_log.csv / model.rcsc / eval.csv / reconstructions/")
    print("=" * 60)


if __name__ == "__main__":
    main()
