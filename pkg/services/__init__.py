# 數值核心與服務模組
