from ivuq.commands import evaluate, predict, report, simulate, train

# Registered in this order on the CLI
COMMANDS = [simulate, train, predict, evaluate, report]
