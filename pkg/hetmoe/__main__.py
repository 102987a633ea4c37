from hetmoe.cli.commands import main

raise SystemExit(main())
