"""
命令行工具模块

提供校准、实验运行、参数扫描和轨迹导出命令。
"""
