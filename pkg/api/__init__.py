# 命令列指令模組
