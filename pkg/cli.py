"""AmbiFlow 명령행: 데이터 생성, 학습, 평가, 가설 샘플링, 가설 수 스윕, 절제 실험"""

import argparse
import logging
import os
import sys
from pathlib import Path

import pandas as pd

from errors import AmbiFlowError, CheckpointError, DatasetError, UsageError
from fileio import atomic_write_frame, atomic_write_json
from metrics import evaluate, scene_rng, sweep_hypothesis_counts
from model import AmbiFlowModel, SceneInputs
from synthdata import AmbiguityConfig, generate_dataset, read_dataset
from trainer import lattice_configs, load_train_config, parse_override, train

logger = logging.getLogger(__name__)

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def configure_logging():
    level = os.environ.get("AMBIFLOW_LOG", "WARNING").upper()
    if level not in LOG_LEVELS:
        level = "WARNING"
    logging.basicConfig(level=getattr(logging, level), format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        force=True)


def _require_file(path, what, error):
    if not Path(path).exists():
        raise error(f"{what} 파일이 없습니다: {path}")


def _overrides(args):
    overrides = dict(parse_override(item) for item in (args.set or []))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "iterations", None) is not None:
        overrides["iterations"] = args.iterations
    return overrides


def _seed(args):
    return 0 if args.seed is None else args.seed


def _load_scenes(path):
    _require_file(path, "데이터셋", DatasetError)
    _, scenes = read_dataset(path)
    return scenes


def _load_model(path):
    _require_file(path, "체크포인트", CheckpointError)
    model, _ = AmbiFlowModel.load(path)
    return model


def _parse_n_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--n-list 는 쉼표로 구분한 정수여야 합니다: {text}") from exc
    if not values or min(values) < 1:
        raise UsageError(f"--n-list 는 1 이상의 정수여야 합니다: {text}")
    return values


# ---- 명령 ----

def cmd_gen_data(args):
    config = AmbiguityConfig(occlusion_prob=args.occlusion_prob, mask_unavailable_prob=args.mask_unavailable_prob,
                             heatmap_noise=args.heatmap_noise)
    digest = generate_dataset(args.n, args.seed, args.out, config, threads=args.threads)
    print(digest)


def cmd_train(args):
    config = load_train_config(args.preset, args.config, _overrides(args))
    scenes = _load_scenes(args.data)
    result = train(config, scenes, checkpoint_path=args.out, show_progress=args.progress)
    log_path = args.log or f"{args.out}.log.csv"
    atomic_write_frame(log_path, result.log)
    print(f"checkpoint: {args.out}  log: {log_path}  examples: {result.examples}  dropped: {result.dropped}")


def cmd_eval(args):
    model = _load_model(args.checkpoint)
    scenes = _load_scenes(args.data)
    report = evaluate(model, scenes, args.n_hypotheses, seed=_seed(args), threads=args.threads,
                      pve_aligned=not args.no_pve_align, show_progress=args.progress)
    report.write(args.report)
    print(pd.Series(report.aggregate).to_string())


def cmd_sample(args):
    model = _load_model(args.checkpoint)
    scenes = _load_scenes(args.data)
    indices = args.scene if args.scene else list(range(len(scenes)))
    out = []
    for index in indices:
        if not 0 <= index < len(scenes):
            raise UsageError(f"장면 번호 {index} 가 범위를 벗어났습니다 (장면 {len(scenes)}개)")
        inputs = SceneInputs.from_scene(scenes[index])
        hyps = model.hypotheses(inputs, args.n_hypotheses, scene_rng(_seed(args), index))
        mode = model.mode_prediction(inputs)
        out.append({
            "scene": index,
            "seed": scenes[index].seed,
            "beta": hyps.betas[0].tolist(),
            "poses_6d": hyps.poses.tolist(),
            "keypoints3d": hyps.keypoints3d.tolist(),
            "projections": hyps.projections.tolist(),
            "mode": {"pose_6d": mode.poses[0].tolist(), "keypoints3d": mode.keypoints3d[0].tolist(),
                     "projection": mode.projections[0].tolist()},
        })
    atomic_write_json(args.out, {"n_hypotheses": args.n_hypotheses, "scenes": out})


def cmd_sweep_n(args):
    n_list = _parse_n_list(args.n_list)
    model = _load_model(args.checkpoint)
    scenes = _load_scenes(args.data)
    curve = sweep_hypothesis_counts(model, scenes, n_list, seed=_seed(args), threads=args.threads,
                                    show_progress=args.progress)
    atomic_write_frame(args.out, curve)
    print(curve.to_string(index=False))


def cmd_ablate(args):
    rows = lattice_configs(args.preset, args.config, _overrides(args))
    train_scenes = _load_scenes(args.data)
    eval_scenes = _load_scenes(args.eval_data) if args.eval_data else train_scenes
    table = []
    for name, config in rows:
        logger.info("절제 행 '%s' 학습", name)
        checkpoint = Path(args.checkpoint_dir) / f"{name}.afck" if args.checkpoint_dir else None
        result = train(config, train_scenes, checkpoint_path=checkpoint, show_progress=args.progress)
        report = evaluate(result.model, eval_scenes, args.n_hypotheses, seed=_seed(args), threads=args.threads)
        table.append({"row": name, "final_total": float(result.log["total"].iloc[-1]), **report.aggregate})
    frame = pd.DataFrame(table)
    atomic_write_frame(args.out, frame)
    print(frame[["row", "min_mpjpe", "min_pa_mpjpe", "min_pve", "perc_in", "min_dist"]].to_string(index=False))


COMMANDS = ["gen-data", "train", "eval", "sample", "sweep-n", "ablate"]
HANDLERS = [cmd_gen_data, cmd_train, cmd_eval, cmd_sample, cmd_sweep_n, cmd_ablate]


def _common(parser, threads=False):
    parser.add_argument("--seed", type=int, default=None, help="난수 시드")
    parser.add_argument("--progress", action="store_true", help="진행 막대 표시")
    if threads:
        parser.add_argument("--threads", type=int, default=1, help="장면 병렬 처리 스레드 수")


def _config_flags(parser, default_preset):
    parser.add_argument("--preset", default=default_preset, help="presets/ 의 설정 프리셋 이름")
    parser.add_argument("--config", default=None, help="추가 JSON 설정 파일")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="설정 덮어쓰기 (예: weights.mmd=0)")
    parser.add_argument("--iterations", type=int, default=None, help="반복 횟수 덮어쓰기")


def build_parser():
    parser = _Parser(prog="ambiflow", description="합성 데이터 위의 조건부 흐름 3D 포즈 분포 학습 실험실")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="합성 장면 데이터셋 생성")
    p.add_argument("--n", type=int, required=True, help="장면 수")
    p.add_argument("--seed", type=int, default=0, help="첫 장면 시드 (장면 i 는 seed+i)")
    p.add_argument("--occlusion-prob", type=float, default=0.5, help="가림 확률")
    p.add_argument("--mask-unavailable-prob", type=float, default=0.2, help="마스크를 쓰지 않는 장면 비율")
    p.add_argument("--heatmap-noise", type=float, default=0.02, help="히트맵 잡음 상한")
    p.add_argument("--threads", type=int, default=1, help="생성 스레드 수")
    p.add_argument("--out", required=True, help="출력 데이터셋 경로 (매니페스트는 <out>.json)")

    p = sub.add_parser("train", help="모델 학습")
    _common(p)
    _config_flags(p, "desk")
    p.add_argument("--data", required=True, help="학습 데이터셋")
    p.add_argument("--out", required=True, help="체크포인트 경로")
    p.add_argument("--log", default=None, help="학습 기록 CSV (기본값 <out>.log.csv)")

    p = sub.add_parser("eval", help="다중 가설 평가")
    _common(p, threads=True)
    p.add_argument("--checkpoint", required=True, help="체크포인트 경로")
    p.add_argument("--data", required=True, help="평가 데이터셋")
    p.add_argument("--n-hypotheses", type=int, default=100, help="장면당 가설 수")
    p.add_argument("--report", required=True, help="보고서 경로 (.json 또는 .csv)")
    p.add_argument("--no-pve-align", action="store_true", help="PVE 를 루트 정렬 없이 계산")

    p = sub.add_parser("sample", help="장면별 가설을 JSON 으로 저장")
    _common(p)
    p.add_argument("--checkpoint", required=True, help="체크포인트 경로")
    p.add_argument("--data", required=True, help="데이터셋")
    p.add_argument("--scene", type=int, action="append", help="장면 번호 (반복 가능, 기본값 전체)")
    p.add_argument("--n-hypotheses", type=int, default=100, help="장면당 가설 수")
    p.add_argument("--out", required=True, help="출력 JSON 경로")

    p = sub.add_parser("sweep-n", help="가설 수에 따른 min-of-N 곡선")
    _common(p, threads=True)
    p.add_argument("--checkpoint", required=True, help="체크포인트 경로")
    p.add_argument("--data", required=True, help="평가 데이터셋")
    p.add_argument("--n-list", default="1,5,10,25,50,100", help="쉼표로 구분한 N 목록")
    p.add_argument("--out", required=True, help="출력 CSV 경로")

    p = sub.add_parser("ablate", help="절제 격자의 모든 행을 학습하고 평가")
    _common(p, threads=True)
    _config_flags(p, "components")
    p.add_argument("--data", required=True, help="학습 데이터셋")
    p.add_argument("--eval-data", default=None, help="평가 데이터셋 (기본값 학습 데이터셋)")
    p.add_argument("--n-hypotheses", type=int, default=100, help="장면당 가설 수")
    p.add_argument("--checkpoint-dir", default=None, help="행별 체크포인트 저장 디렉터리")
    p.add_argument("--out", required=True, help="비교 표 CSV 경로")
    return parser


def run(argv=None):
    """명령 하나를 실행하고 종료 코드를 돌려주는 함수 (0 성공, 1 사용법 오류, 2 실행 실패)"""
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("명령을 지정하세요: " + ", ".join(COMMANDS))
        for name in ("n", "n_hypotheses", "threads"):
            value = getattr(args, name, None)
            if value is not None and value < (0 if name == "n" else 1):
                raise UsageError(f"--{name.replace('_', '-')} 값이 올바르지 않습니다: {value}")
        HANDLERS[COMMANDS.index(args.command)](args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 0
    except UsageError as exc:
        print(f"사용법 오류: {exc}", file=sys.stderr)
        return 1
    except (AmbiFlowError, OSError) as exc:
        print(f"실패: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
