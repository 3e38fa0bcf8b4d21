from .synthdet import main

main()
