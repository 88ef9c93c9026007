"""
avprune - 命令行接口

提供校准、剪枝实验、参数扫描、注意力轨迹导出和热力图导出命令。
"""

import sys
import json
from pathlib import Path
from typing import Any, Dict, Optional, Tuple
import click
from dotenv import load_dotenv
from loguru import logger

# 添加src目录到Python路径
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.config import default_spec, load_spec
from core.models import AVPruneError, ConfigurationError
from core.pipeline import ExperimentPipeline
from core.reports import to_json, write_json
from core.strategies import STRATEGIES


def setup_logging(log_level: str = "INFO"):
    """设置日志"""
    logger.remove()
    logger.add(
        sys.stderr,
        level=log_level,
        format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
    )


def fail(error: Exception):
    """以结构化JSON报告错误并退出"""
    if isinstance(error, AVPruneError):
        payload = error.to_dict()
    else:
        logger.exception("未预期的错误")
        payload = {"error": type(error).__name__, "message": str(error)}
    click.echo(json.dumps(payload, ensure_ascii=False), err=True)
    sys.exit(1)


def spec_options(func):
    """实验配置相关的公共参数"""
    options = [
        click.option('--config', type=click.Path(exists=True, path_type=Path),
                     help='配置文件路径（JSON格式）'),
        click.option('--seed', type=click.IntRange(min=0), help='随机种子（默认读取 AVPRUNE_SEED）'),
        click.option('--alpha', type=float, help='rollout 注意力权重 α'),
        click.option('--middle-layer', type=click.IntRange(min=1), help='全局剪枝层'),
        click.option('--fine-ratio', type=float, help='细粒度剪枝比例 P'),
        click.option('--strategy', type=click.Choice(sorted(STRATEGIES)), help='全局剪枝策略'),
        click.option('--fine-strategy', type=click.Choice(sorted(STRATEGIES)), help='细粒度剪枝策略'),
        click.option('--cutoff', help='全局截断位置: 整数、auto 或 none'),
        click.option('--out', help='输出目录'),
        click.option('--workers', type=click.IntRange(min=1), help='并行任务数'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def resolve_spec(config: Optional[Path], **overrides: Any):
    return load_spec(config, overrides)


def parse_layers(text: str):
    try:
        return [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise ConfigurationError(f'无效的层编号列表: {text}') from None


def make_pipeline(ctx) -> ExperimentPipeline:
    return ExperimentPipeline({'show_progress': ctx.obj.get('log_level') != 'ERROR'})


@click.group()
@click.option('--log-level', default='INFO',
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR']),
              help='日志级别')
@click.pass_context
def cli(ctx, log_level):
    """avprune - 音视频token两阶段剪枝实验工具"""
    load_dotenv()
    ctx.ensure_object(dict)
    ctx.obj['log_level'] = log_level
    setup_logging(log_level)


@cli.command()
@spec_options
@click.option('--trace', 'traces', multiple=True, type=click.Path(exists=True, path_type=Path),
              help='AVTRACE1 注意力轨迹（可重复），不提供时使用合成样本')
@click.option('--samples', type=click.IntRange(min=1), help='合成校准样本数')
@click.pass_context
def calibrate(ctx, config: Optional[Path], traces: Tuple[Path, ...], samples: Optional[int],
              **overrides):
    """从注意力 rollout 校准全局截断位置"""
    try:
        spec = resolve_spec(config, samples=samples, **overrides)
        result = make_pipeline(ctx).calibrate(spec, traces)
        path = write_json(
            {"config_hash": spec.config_hash(), "spec": spec.model_dump(mode="json"),
             "calibration": result.to_dict()},
            Path(spec.output.out) / "calibration.json",
        )
        click.echo(f"✅ 截断位置: {result.cutoff.position}")
        click.echo(f"📄 校准报告: {path}")
    except Exception as e:
        fail(e)


@cli.command()
@spec_options
@click.pass_context
def run(ctx, config: Optional[Path], **overrides):
    """运行原始解码与剪枝解码的对比实验"""
    try:
        spec = resolve_spec(config, **overrides)
        output = make_pipeline(ctx).run(spec)
        summary = output.report["summary"]
        click.echo(f"✅ 实验完成: {spec.name} ({summary['config_hash']})")
        click.echo(f"📊 相对FLOPs: {summary['relative_flops']:.2f}")
        if summary['needle_pass_rate'] is not None:
            click.echo(f"🎯 针头任务通过率: {summary['needle_pass_rate']:.2%}")
        for path in output.paths:
            click.echo(f"📄 {path}")
    except Exception as e:
        fail(e)


@cli.command()
@spec_options
@click.option('--axis', required=True,
              type=click.Choice(['fine_ratio', 'strategy', 'fine_strategy', 'middle_layer', 'alpha']),
              help='扫描的配置轴')
@click.option('--values', 'values', required=True, help='逗号分隔的取值')
@click.pass_context
def sweep(ctx, config: Optional[Path], axis: str, values: str, **overrides):
    """沿一个配置轴扫描，每个取值输出一行"""
    try:
        spec = resolve_spec(config, **overrides)
        items = [v.strip() for v in values.split(',') if v.strip()]
        if not items:
            raise ConfigurationError('--values 至少需要一个取值')
        output = make_pipeline(ctx).sweep(spec, axis, items)
        click.echo(f"✅ 扫描完成: {axis} × {len(items)}")
        for path in output.paths:
            click.echo(f"📄 {path}")
    except Exception as e:
        fail(e)


@cli.command('trace-dump')
@spec_options
@click.option('--trace', type=click.Path(path_type=Path), help='输出的轨迹文件路径')
@click.pass_context
def trace_dump(ctx, config: Optional[Path], trace: Optional[Path], **overrides):
    """在玩具模型上捕获注意力并写出 AVTRACE1 文件"""
    try:
        spec = resolve_spec(config, **overrides)
        path = make_pipeline(ctx).trace_dump(spec, trace)
        click.echo(f"📄 注意力轨迹: {path}")
    except Exception as e:
        fail(e)


@cli.command()
@spec_options
@click.option('--trace', type=click.Path(exists=True, path_type=Path), help='读取的轨迹文件')
@click.option('--layers', help='逗号分隔的层编号（默认 4、L/2、L-4）')
@click.pass_context
def heatmap(ctx, config: Optional[Path], trace: Optional[Path], layers: Optional[str], **overrides):
    """导出 rollout 与原始注意力热力图CSV"""
    try:
        spec = resolve_spec(config, **overrides)
        layer_list = parse_layers(layers) if layers else None
        paths = make_pipeline(ctx).heatmap(spec, layer_list, trace)
        click.echo(f"✅ 写出 {len(paths)} 个热力图")
        for path in paths:
            click.echo(f"📄 {path}")
    except Exception as e:
        fail(e)


@cli.command('config-template')
def config_template():
    """输出默认实验配置（JSON）"""
    template: Dict[str, Any] = default_spec().model_dump(mode="json")
    click.echo(to_json(template), nl=False)


if __name__ == '__main__':
    cli()
