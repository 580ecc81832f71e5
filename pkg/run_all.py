import os
import subprocess
import sys

# 수렴률 실험 셀 (d, s, p) → 각자 다른 출력 디렉터리
cells = [
    (2, 0.5, 1.5),
    (2, 0.5, 2.0),
    (2, 1.0, 1.5),
    (2, 1.0, 2.0),
    (3, 0.5, 2.0),
    (3, 1.0, 2.0),
]

config_file = sys.argv[1] if len(sys.argv) > 1 else None

# 실행할 명령 리스트 (현재 인터프리터 사용)
commands = []
for d, s, p in cells:
    cmd = [sys.executable, "main.py", "rates", "--set", f"d={d}", "--set", f"s={s}", "--set", f"p={p}",
           "--set", f"output_dir={os.path.join('runs', f'rates_d{d}_s{s}_p{p}')}"]
    if config_file:
        cmd += ["--config", config_file]
    commands.append(cmd)

# 프로세스를 저장할 리스트
processes = []

try:
    for cmd in commands:
        print(f"🚀 실행 중: {' '.join(cmd)}")
        processes.append(subprocess.Popen(cmd))

    # 모든 프로세스가 종료될 때까지 대기
    codes = [process.wait() for process in processes]
    failed = [" ".join(cmd) for cmd, code in zip(commands, codes) if code != 0]
    if failed:
        print(f"🚨 실패한 셀 {len(failed)}개:")
        for line in failed:
            print(f"   {line}")
        sys.exit(1)
    print("✅ 모든 셀 완료")

except KeyboardInterrupt:
    print("\n⛔ 종료 중...")
    for process in processes:
        process.terminate()
