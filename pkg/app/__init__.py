"""
City Scout 城市追逃仿真
======================

四旋翼侦察机在有遮挡的城市中探索，在线学习可渲染的场景表示，
并通过最大化互信息跟踪多个会躲藏的地面目标。

主要特性:
- 挤出建筑底面的真值地图与光线投射 RGB-D 传感器
- 自助采样体素辐射场集成（体渲染、占据伯努利、集成方差）
- 多目标网格贝叶斯滤波（角点逃逸运动核、检测/未检测更新）
- 互信息与贪心两类侦察策略，最小 snap 轨迹
- 静止、主动躲藏、随机目标点三种目标行为
- 实验编排、批量运行、汇总报告与命令行

架构设计:
- core: 配置、日志、异常
- models: 领域对象
- schemas: 外部文件模式（地图、实验配置）
- services: 每个子系统一个服务模块
- tasks: 多进程批量实验
"""

__version__ = "0.1.0"
__author__ = "City Scout Team"
