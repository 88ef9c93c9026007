"""
avprune - 音视频大模型推理的两阶段token剪枝

在确定性的玩具解码器上实现基于注意力累积校准的全局剪枝和
基于最后查询注意力的逐层细粒度剪枝，并提供FLOPs统计和实验工具。
"""

__version__ = "0.1.0"
