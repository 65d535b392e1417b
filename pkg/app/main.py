"""
命令行主入口
============

子命令：run（单次实验）、sweep（策略 × 种子矩阵）、report（汇总日志）、
render-map（地图静态图）、convert-osm（GeoJSON 底面转换）。

设计思路:
1. argparse 子命令，配置文件 + 可重复的 --set key=value 覆盖
2. 启动时统一配置结构化日志
3. 退出码：0 成功，1 配置/地图输入错误，2 运行期中止
4. 所有实验输出写到带时间戳的目录，配置文件拷贝在其中
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import structlog

from .core.config import settings
from .core.exceptions import CityScoutException, exit_code_for, log_exception
from .core.logging import configure_logging
from .schemas.episode import load_episode_config
from .services import citymap_service, episode_service, osm_service, report_service
from .tasks import sweep_tasks

logger = structlog.get_logger(__name__)

DEFAULT_METHODS = "GTmap+MAP,GTmap+MI,NeRF:4k+MI"
DEFAULT_SEEDS = "72,80,88"


def _split(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cityscout", description="Active-perception pursuit-evasion simulator")
    parser.add_argument("--log-level", default=None, help="override CITYSCOUT_LOG_LEVEL")
    parser.add_argument("--log-format", choices=("json", "console"), default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("-c", "--config", type=Path, default=None, help="episode YAML file")
        p.add_argument("-s", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("-o", "--out", type=Path, default=None, help="output root directory")

    run = sub.add_parser("run", help="run one episode")
    add_config_args(run)

    sweep = sub.add_parser("sweep", help="run a method x seed matrix")
    add_config_args(sweep)
    sweep.add_argument("--methods", default=DEFAULT_METHODS, help="comma separated, e.g. GTmap+MI,NeRF:2k+MI")
    sweep.add_argument("--seeds", default=DEFAULT_SEEDS)
    sweep.add_argument("--workers", type=int, default=None, help="1 runs in-process; more dispatches through Celery")
    sweep.add_argument("--no-report", action="store_true", help="skip the summary report")

    report = sub.add_parser("report", help="aggregate episode logs")
    report.add_argument("logs", nargs="+", type=Path, help="episode log directories or roots to search")
    report.add_argument("-o", "--out", type=Path, required=True)
    report.add_argument("--map", type=Path, default=None, help="draw buildings on trajectory plots")

    render = sub.add_parser("render-map", help="static map image")
    render.add_argument("map", type=Path)
    render.add_argument("-o", "--out", type=Path, required=True)
    render.add_argument("--spacing", type=float, default=10.0)
    render.add_argument("--connectivity", type=int, choices=(4, 8), default=8)
    render.add_argument("--no-graph", action="store_true")

    convert = sub.add_parser("convert-osm", help="GeoJSON building footprints to a map file")
    convert.add_argument("src", type=Path)
    convert.add_argument("dst", type=Path)
    convert.add_argument("--origin", default=None, help="lon,lat projection origin")
    convert.add_argument("--altitude-cap", type=float, default=150.0)
    convert.add_argument("--default-height", type=float, default=10.0)
    return parser


def cmd_run(args) -> int:
    config = load_episode_config(args.config, args.overrides)
    run_dir = episode_service.prepare_run_dir(config, args.out)
    log = episode_service.run_episode(config, out_dir=run_dir)
    summary = log.tracking_summary()
    logger.info("Run finished", run_dir=str(run_dir), **summary)
    print(run_dir)
    return 0


def cmd_sweep(args) -> int:
    base = load_episode_config(args.config, args.overrides)
    seeds = [int(s) for s in _split(args.seeds)]
    out_root = episode_service.prepare_run_dir(base, args.out, name="sweep")
    results = sweep_tasks.run_sweep(base, _split(args.methods), seeds, out_root, args.workers)
    for r in results:
        print(f"{r.label}\t{r.seed}\t{'ok' if r.ok else 'FAILED: ' + r.error}\t{r.log_dir or ''}")

    finished = [Path(r.log_dir) for r in results if r.ok]
    if finished and not args.no_report:
        logs = [report_service.load_log(p) for p in finished]
        city = citymap_service.load_map(base.map_path)
        report_service.emit_report(logs, out_root / "report", city)
        print(out_root / "report")
    return 0 if all(r.ok for r in results) else 2


def cmd_report(args) -> int:
    dirs: List[Path] = []
    for p in args.logs:
        dirs += [p] if (p / "meta.yaml").exists() else report_service.find_logs(p)
    if not dirs:
        logger.error("No episode logs found", paths=[str(p) for p in args.logs])
        return 2
    logs = [report_service.load_log(d) for d in dirs]
    city = citymap_service.load_map(args.map) if args.map else None
    report_service.emit_report(logs, args.out, city)
    print(args.out)
    return 0


def cmd_render_map(args) -> int:
    city = citymap_service.load_map(args.map)
    osm_service.render_map(city, args.out, args.spacing, args.connectivity, show_graph=not args.no_graph)
    print(args.out)
    return 0


def cmd_convert_osm(args) -> int:
    origin = None
    if args.origin:
        lon, lat = (float(v) for v in _split(args.origin))
        origin = (lon, lat)
    city = osm_service.convert_osm_file(args.src, args.dst, origin, args.altitude_cap, args.default_height)
    logger.info("Map written", path=str(args.dst), buildings=len(city.buildings))
    print(args.dst)
    return 0


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "render-map": cmd_render_map,
    "convert-osm": cmd_convert_osm,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(level=args.log_level, renderer=args.log_format)
    logger.debug("Command started", command=args.command, output_root=str(settings.output_root))
    try:
        return COMMANDS[args.command](args)
    except CityScoutException as e:
        log_exception(e, {"command": args.command})
        print(f"error: {e.message}", file=sys.stderr)
        return exit_code_for(e)
    except Exception as e:
        log_exception(e, {"command": args.command})
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
