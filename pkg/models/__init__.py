# 配置、參數與報告模型
