"""
任务模块
========

多进程批量实验（策略 × 种子矩阵）。
"""
