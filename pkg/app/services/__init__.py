"""
服务层
======

每个子系统一个服务模块，均为无状态函数（EpisodeService 持有一次实验的状态）。

- citymap_service: 地图加载、自由空间查询、地面格点图、最短路径
- raysim_service: 真值 RGB-D 渲染、可见性、目标检测
- scenefield_service: 体素场集成的渲染、训练、检查点
- belief_service: 多目标网格贝叶斯滤波
- infogain_service: 熵、互信息与候选评分
- flight_service: 三维路由与最小 snap 轨迹
- policy_service: 侦察机与目标策略
- episode_service: 实验编排与指标
- report_service: 日志落盘与汇总报告
- osm_service: GeoJSON 转换与地图静态图
"""
